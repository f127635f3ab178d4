#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "headlens/error.hpp"
#include "headlens/tokenizer.hpp"

namespace headlens {

enum class NormKind { layernorm, rmsnorm };
enum class PositionalKind { learned, rope };
enum class Activation { relu, gelu };

struct ModelConfig {
  int n_layers = 0;
  int n_heads = 0;  // per layer
  int d_model = 0;
  int d_head = 0;
  int d_mlp = 0;
  int vocab_size = 0;
  int max_seq_len = 0;
  float norm_epsilon = 1e-5f;
  NormKind norm = NormKind::rmsnorm;
  PositionalKind positional = PositionalKind::learned;
  Activation activation = Activation::gelu;
  bool tie_embeddings = false;

  // Throws Error when a count is non-positive or n_heads * d_head != d_model.
  void validate() const;
  int total_heads() const { return n_layers * n_heads; }
};

struct HeadLocator {
  int layer = 0;
  int head = 0;

  auto operator<=>(const HeadLocator&) const = default;
  std::string str() const;  // "L3H5"
};

void check_head(const ModelConfig& cfg, HeadLocator h);

/// Flat index layer * n_heads + head.
inline std::size_t head_index(const ModelConfig& cfg, HeadLocator h) {
  return static_cast<std::size_t>(h.layer) * cfg.n_heads + h.head;
}

/// Last-token activations of one forward pass.
///
/// `heads` holds, for every (layer, head), that head's additive contribution to
/// the residual stream at the final position (its slice of the attention output
/// projection). When residuals were requested, `residual[l]` is the stream
/// entering block l (residual[0] is the embedding, residual[n_layers] the
/// stream after the last block) and `mlp[l]` is block l's MLP output.
class ActivationRecord {
 public:
  ActivationRecord() = default;
  ActivationRecord(std::string prompt_id, int n_layers, int n_heads, int d_model,
                   std::vector<float> heads);

  const std::string& prompt_id() const { return prompt_id_; }
  int n_layers() const { return n_layers_; }
  int n_heads() const { return n_heads_; }
  int d_model() const { return d_model_; }

  std::span<const float> head(HeadLocator h) const;
  std::span<const float> all_heads() const { return heads_; }

  bool has_residuals() const { return !residual_.empty(); }
  std::span<const float> residual(int layer) const;
  std::span<const float> mlp(int layer) const;
  void set_residuals(std::vector<float> residual, std::vector<float> mlp);

 private:
  std::string prompt_id_;
  int n_layers_ = 0;
  int n_heads_ = 0;
  int d_model_ = 0;
  std::vector<float> heads_;
  std::vector<float> residual_;
  std::vector<float> mlp_;
};

struct HeadPatch {
  HeadLocator head;
  std::vector<float> value;
};

/// h_layer <- h_layer + alpha * vector at the final position, applied after
/// block `layer` and before block layer + 1.
struct Injection {
  int layer = 0;
  std::vector<float> vector;
  float alpha = 1.0f;
};

struct HookSet {
  bool capture_heads = false;
  bool capture_residuals = false;
  std::vector<HeadPatch> patches;
  std::vector<Injection> injections;
};

struct ForwardResult {
  std::vector<float> logits;
  std::vector<float> probs;
  std::optional<ActivationRecord> record;
};

using WeightMap = std::map<std::string, std::vector<float>>;

class Model;

/// Per-position state of an unhooked pass, kept so that hooks touching only the
/// final position can be evaluated without recomputing the prefix.
class Trace {
 public:
  const std::vector<int>& tokens() const { return tokens_; }
  const ForwardResult& base() const { return base_; }

 private:
  friend class Model;
  std::vector<int> tokens_;
  // keys/values per layer: [pos][d_model], rope already applied to keys.
  std::vector<std::vector<float>> keys_;
  std::vector<std::vector<float>> values_;
  // stream entering each block at the final position, plus the final stream.
  std::vector<std::vector<float>> last_residual_;
  ForwardResult base_;
};

class Model {
 public:
  /// Loads `manifest.json`, `weights.bin` and `vocab.json` from a directory.
  static Model load(const std::filesystem::path& dir);
  static Model from_weights(ModelConfig cfg, WeightMap weights, Tokenizer tokenizer);

  /// Writes the directory layout `load` reads, with per-tensor checksums.
  void save(const std::filesystem::path& dir) const;

  const ModelConfig& config() const { return cfg_; }
  const Tokenizer& tokenizer() const { return tokenizer_; }
  const WeightMap& weights() const { return *weights_; }

  ForwardResult forward(std::span<const int> tokens, const HookSet& hooks = {}) const;

  std::vector<float> forward_with_patch(std::span<const int> tokens,
                                        const std::vector<HeadPatch>& patches) const;
  std::vector<float> forward_with_injection(std::span<const int> tokens, int layer,
                                            std::span<const float> v, float alpha) const;

  /// Unhooked pass that keeps the prefix state; base().record holds head captures.
  Trace trace(std::span<const int> tokens, bool capture_heads = true) const;

  /// Re-evaluates only the final position under `hooks` (patches and
  /// injections), reusing the prefix from `trace`. Bit-identical to `forward`
  /// with the same hooks.
  ForwardResult resume(const Trace& trace, const HookSet& hooks) const;

 private:
  struct Block {
    const float* ln1_w;
    const float* ln1_b;
    const float* wq;
    const float* wk;
    const float* wv;
    const float* wo;
    const float* ln2_w;
    const float* ln2_b;
    const float* w_in;
    const float* b_in;
    const float* w_out;
    const float* b_out;
  };

  Model() = default;
  void bind();
  void validate_hooks(std::span<const int> tokens, const HookSet& hooks) const;
  void embed(int token, int pos, float* out) const;
  void norm(const float* x, const float* w, const float* b, float* out) const;
  void rope(float* vec, int pos) const;
  void mlp(const Block& blk, const float* x, float* out) const;
  void attend(const Block& blk, int pos, const float* q, const float* keys, const float* values,
              const float* last_key, const float* last_value, float* head_out) const;
  void finish(const float* h, ForwardResult& out) const;
  ForwardResult run(std::span<const int> tokens, const HookSet& hooks, Trace* trace) const;

  ModelConfig cfg_;
  std::shared_ptr<const WeightMap> weights_;
  Tokenizer tokenizer_;
  std::vector<Block> blocks_;
  const float* tok_embed_ = nullptr;
  const float* pos_embed_ = nullptr;
  const float* lnf_w_ = nullptr;
  const float* lnf_b_ = nullptr;
  const float* lm_head_ = nullptr;
};

/// Canonical tensor shapes for a config; optional tensors are flagged.
struct TensorSpec {
  std::string name;
  std::vector<int> shape;
  bool optional = false;
};
std::vector<TensorSpec> tensor_layout(const ModelConfig& cfg);

std::string to_string(NormKind k);
std::string to_string(PositionalKind k);
std::string to_string(Activation a);

/// FNV-1a 64-bit, hex-encoded. Used for tensor checksums and config hashes.
std::string fnv1a_hex(std::span<const std::uint8_t> bytes);
std::uint64_t fnv1a(std::span<const std::uint8_t> bytes);

}  // namespace headlens
