#pragma once

#include <string>

#include "hfgd/model.hpp"

namespace hfgd {

// A checkpoint is a directory:
//   config.txt    model configuration, one key=value per line
//   params.bin    every parameter and buffer as concatenated tensor records
//   manifest.txt  one `name<TAB>d0,d1,...<TAB>byte_offset` line per record
// Loading rebuilds the model from config.txt and requires the manifest to
// name exactly the tensors that model owns.
void save_checkpoint(const std::string& dir, const Model& model);
Model load_checkpoint(const std::string& dir);

}  // namespace hfgd
