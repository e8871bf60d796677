#pragma once

#include <string>

#include "axmul/net.hpp"

namespace axmul {

// Versioned binary model container. Header carries a magic and format
// version; layer records carry structure, quantization, and calibration
// state as 64-bit scalars; weight/bias/batch-norm blobs are little-endian
// 32-bit floats; the file ends with a checksum of everything before it.
// Reading verifies magic, version, checksum, and per-layer blob sizes.
inline constexpr uint32_t kModelFormatVersion = 1;

void write_model(const ModelGraph& m, const std::string& path);
ModelGraph read_model(const std::string& path);

}  // namespace axmul
