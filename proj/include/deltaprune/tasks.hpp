#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "deltaprune/grad.hpp"
#include "deltaprune/mixers.hpp"

namespace dp {

// Configuration error in a task or model description.
struct config_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ToyConfig {
  int vocab = 64;
  int model_dim = 32;
  int num_layers = 2;
  int num_heads = 2;
  int key_dim = 16;
  int value_dim = 16;
  int conv_len = 4;
  int seq_len = 33;
  int num_pairs = 8;
  MixerVariant variant = MixerVariant::delta;
  double rms_eps = 1e-6;
};

// Embedding -> residual mixer layers -> language-model head.
struct ToyModel {
  ToyConfig config;
  Matrix embedding;  // vocab x model_dim
  std::vector<LayerParams> layers;
  Matrix lm_head;  // model_dim x vocab
};

ToyModel init_toy_model(const ToyConfig& cfg, uint64_t seed);

// Associative recall: P distinct key tokens each paired with a value token
// (keys and values drawn disjointly), laid out k1 v1 ... kP vP, padded with a
// repeat of the last value token, ending with a probe (one of the keys); the
// training target is the probed key's value.
struct RecallSpec {
  int vocab = 64;
  int num_pairs = 8;
  int seq_len = 33;
};

struct RecallSequence {
  std::vector<int> tokens;  // length seq_len, probe at the back
  int target = -1;
};

RecallSequence gen_recall_sequence(const RecallSpec& spec, std::mt19937_64& rng);
std::vector<RecallSequence> gen_recall(const RecallSpec& spec, int count, uint64_t seed);

// Gradients for every tensor in the model, ordered to match collect_params.
struct ModelGrads {
  Matrix embedding;
  std::vector<ParamGrads> layers;
  Matrix lm_head;
};
ModelGrads zero_model_grads(const ToyModel& m);

std::vector<Matrix*> collect_params(ToyModel& m);
std::vector<const Matrix*> collect_grads(const ModelGrads& g);

struct ModelTape {
  std::vector<Matrix> layer_inputs;  // inputs to each layer; back() is the final hidden state
  std::vector<LayerTape> layers;
};

// Final hidden states (T x model_dim) for one token sequence.
Matrix model_forward(const ToyModel& m, const std::vector<int>& tokens, ModelTape* tape = nullptr);

// Cross-entropy at the probe (final) position; accumulates gradients.
double model_loss_and_grad(const ToyModel& m, const RecallSequence& seq, ModelGrads& grads);

// Probe-position logits for evaluation.
std::vector<double> probe_logits(const ToyModel& m, const std::vector<int>& tokens);
int argmax_lowest_tie(std::span<const double> v);

double eval_recall(const ToyModel& m, const std::vector<RecallSequence>& eval_set);

struct TrainConfig {
  int steps = 8000;
  int batch = 32;
  double lr = 5e-3;
  int eval_every = 200;
  int eval_sequences = 256;
  double target_accuracy = 0.99;  // early stop once reached (<= 0 disables)
  uint64_t seed = 1;
  double divergence_loss = 1e6;  // abort with numeric_error above this
};

struct TrainPoint {
  int step = 0;
  double loss = 0.0;
  double accuracy = -1.0;  // -1 when not evaluated at this step
};

struct TrainMetrics {
  std::vector<TrainPoint> history;
  int steps_run = 0;
  double final_accuracy = 0.0;
};

TrainMetrics train_toy(ToyModel& m, const TrainConfig& cfg);

// Full-parameter recovery fine-tuning after pruning: same loop, default 500 steps.
TrainMetrics recovery_finetune(ToyModel& m, TrainConfig cfg);

}  // namespace dp
