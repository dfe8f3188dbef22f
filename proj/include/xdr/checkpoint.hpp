#pragma once

#include <string>
#include <utility>
#include <vector>

#include "xdr/tensor.hpp"

namespace xdr {

// Binary weight file: magic "XDRW", one version byte, then a count-prefixed
// sequence of (name, shape, float64 payload) records, everything little-endian.
// Round trips are bit-exact.
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor>>& entries);

std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::string& path);

}  // namespace xdr
