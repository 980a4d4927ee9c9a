#pragma once

#include <filesystem>
#include <string>
#include <utility>

#include "asr/layers.hpp"

namespace asr {

struct ModelConfig {
  Index d = 512;
  Index d_ff = 1024;
  Index heads = 8;
  Index enc_layers = 12;
  Index dec_layers = 12;
  Index stack_factor = 4;
  Index mel_bins = 40;
  Index vocab_size = 0;  // set from the data vocabulary
  double dropout = 0.2;
  double char_dropout = 0.1;
  // Global layer-drop parameter; 1 disables the stochastic layers entirely
  // (the depth schedule itself requires p < 1).
  double stochastic_p = 0.5;
  bool ln_identity_on_skip = false;
  bool tie_embedding = false;

  void validate() const;
  bool stochastic_enabled() const { return stochastic_p != 1.0; }
};

struct EncodeOut {
  Tensor memory;                    // [B, T', d]
  Tensor memory_pad_mask;           // [B, 1, T']
  std::vector<Index> out_lengths;   // real steps per sequence
};

/// Encoder-decoder Transformer mapping stacked filter-bank frames to
/// character logits.
class TransformerModel {
 public:
  TransformerModel(ModelConfig config, RngStream init_rng);

  const ModelConfig& config() const { return config_; }

  /// stack -> project -> + positional encoding -> dropout -> encoder layers.
  EncodeOut encode(const Tensor& features, const std::vector<Index>& frame_lengths, Mode mode,
                   RngBundle* rng) const;

  /// Teacher-forced decoder pass over target ids [B, U] (flattened,
  /// row-major); each row must begin with the start symbol. Returns logits
  /// [B, U, vocab].
  Tensor decode_logits(const EncodeOut& enc, const std::vector<int32_t>& target_ids, Index batch,
                       Index steps, Mode mode, RngBundle* rng) const;

  /// encode + decode_logits for one utterance; targets begin with <s>.
  Tensor forward_teacher_forcing(const Tensor& features, const std::vector<int32_t>& target_ids,
                                 Mode mode, RngBundle* rng) const;

  std::vector<std::pair<std::string, Tensor>>& named_parameters() { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& named_parameters() const { return params_; }
  Index parameter_count() const;
  void zero_grads();

  const StochasticPolicy& encoder_policy() const { return enc_policy_; }
  const StochasticPolicy& decoder_policy() const { return dec_policy_; }

 private:
  Tensor embed_targets(const std::vector<int32_t>& ids, Index batch, Index steps, Mode mode,
                       RngBundle* rng) const;
  Tensor output_projection(const Tensor& x) const;

  ModelConfig config_;
  Tensor input_proj_w_, input_proj_b_;
  std::vector<EncoderLayer> encoder_;
  Tensor embedding_;
  std::vector<DecoderLayer> decoder_;
  Tensor output_w_, output_b_;  // output_w_ unused when tied
  StochasticPolicy enc_policy_, dec_policy_;
  std::vector<std::pair<std::string, Tensor>> params_;
};

/// Exact number of scalar parameters the assembled model will hold.
Index count_parameters(const ModelConfig& config);

/// Binary checkpoint: versioned magic, the model config as key=value pairs,
/// the vocabulary characters, then named tensors with shape headers and raw
/// little-endian 64-bit payloads. Round-trips bit-exactly.
void save_checkpoint(const std::filesystem::path& path, const TransformerModel& model,
                     const std::string& vocab_chars);

struct LoadedCheckpoint {
  ModelConfig config;
  std::string vocab_chars;  // UTF-8, non-reserved entries in id order
  std::shared_ptr<TransformerModel> model;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace asr
