#pragma once

#include <string>

#include "xmla/model.hpp"

namespace xmla {

// Checkpoint layout, all little-endian:
//   bytes 0..3   magic "XMLA"
//   bytes 4..7   format version (u32, currently 1)
//   bytes 8..15  metadata length (u64)
//   ...          UTF-8 JSON metadata: model config + tensor directory
//                (name, shape, byte offset into the payload)
//   ...          raw float32 tensor payloads in directory order
// Writes go to a temp file in the target directory and are renamed into
// place, so a killed process never leaves a loadable truncated file.
void save_checkpoint(const LmModel& model, const std::string& path);
LmModel load_checkpoint(const std::string& path);

constexpr uint32_t kCheckpointVersion = 1;

}  // namespace xmla
