#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dsem/nn.hpp"

namespace dsem {

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

// Named parameters in a fixed order. On disk: <dir>/manifest.json lists
// {name, shape, offset, length} (bytes) per entry and <dir>/params.bin holds
// the little-endian float32 values concatenated in manifest order.
struct Checkpoint {
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const;
  bool operator==(const Checkpoint&) const;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
Checkpoint capture_checkpoint(std::span<const Parameter<T>* const> params);

// Concatenation; names must not collide.
Checkpoint merge_checkpoints(const Checkpoint& a, const Checkpoint& b);

// Copies checkpoint values into params. Every param must be present with a
// matching shape; checkpoint entries that match no param are an error unless
// their name starts with one of `ignored_prefixes`. Nothing is written unless
// validation passes.
template <typename T>
void apply_checkpoint(const Checkpoint& ckpt,
                      std::span<Parameter<T>* const> params,
                      std::span<const std::string> ignored_prefixes = {});

// Drops entries whose name starts with prefix.
Checkpoint strip_prefix(const Checkpoint& ckpt, const std::string& prefix);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace dsem
