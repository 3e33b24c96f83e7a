// SPDX-License-Identifier: Apache-2.0
#pragma once

namespace sisma::kernels {

enum class Backend { Scalar, Avx2 };

/// True when the CPU reports AVX2 and FMA.
bool avx2_supported();

/// The backend all kernel entry points dispatch to. Defaults to the best
/// supported one; the SISMA_KERNEL environment variable (scalar|avx2)
/// overrides it at process start.
Backend active_backend();

/// Force a backend (throws sisma::ConfigError if unsupported). Used by the
/// equivalence tests; normal code never calls this.
void set_backend(Backend b);

const char* backend_name(Backend b);

} // namespace sisma::kernels
