#pragma once

// Checkpoint container: 8-byte magic, little-endian u64 manifest length, the
// JSON manifest, then every tensor as contiguous little-endian IEEE-754 in
// manifest order.

#include <cstdint>
#include <string>
#include <vector>

#include "seqcond/config.hpp"
#include "seqcond/hybrid_stack.hpp"
#include "seqcond/train_harness.hpp"

namespace seqcond {

inline constexpr char kCheckpointMagic[9] = "SQCKPT01";
inline constexpr int kCheckpointVersion = 1;

struct CheckpointTensor {
    std::string name;
    Shape shape;
};

struct CheckpointManifest {
    int format_version = kCheckpointVersion;
    std::string dtype;  // f32 | f64
    std::string config_hash;
    Json config;
    std::uint64_t step = 0;
    bool has_optimizer = false;
    std::vector<CheckpointTensor> tensors;
    std::uint64_t payload_bytes = 0;

    std::size_t dtype_size() const { return dtype == "f32" ? 4 : 8; }
};

// Parses and validates the header and manifest, including the payload length
// and the stored config hash against the stored config. Throws InputError.
CheckpointManifest read_checkpoint_manifest(const std::string& path);

template <class T>
std::string encode_checkpoint(HybridLM<T>& model, const ModelConfig& cfg, AdamW<T>* opt, std::uint64_t step);

template <class T>
void save_checkpoint(const std::string& path, HybridLM<T>& model, const ModelConfig& cfg, AdamW<T>* opt,
                     std::uint64_t step);

// Loads into an existing model (and optimizer, when given and present). The
// manifest config hash must equal config_hash(expected) unless force is set.
template <class T>
CheckpointManifest load_checkpoint(const std::string& path, HybridLM<T>& model, AdamW<T>* opt,
                                   const ModelConfig& expected, bool force);

// Writes to a sibling temp file, then renames over the target.
void write_file_atomic(const std::string& path, const std::string& bytes);
std::string read_file(const std::string& path);

}  // namespace seqcond
