// Copyright 2026 The dvemb Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef DVEMB_MODEL_H_
#define DVEMB_MODEL_H_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace dvemb {

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Activation { kRelu, kIdentity };
enum class LossKind { kCrossEntropy, kSquaredError };

const char* ActivationName(Activation activation);
const char* LossName(LossKind loss);
Activation ParseActivation(const std::string& name);
LossKind ParseLoss(const std::string& name);

struct LayerDims {
  std::size_t fan_in = 0;
  std::size_t fan_out = 0;
};

// Architecture of a fully connected network. The activation is applied after
// every layer except the last.
struct ModelSpec {
  std::vector<LayerDims> layers;
  Activation activation = Activation::kRelu;
  bool bias = true;
  LossKind loss = LossKind::kCrossEntropy;

  // Throws kInvalidArgument when the layer chain is inconsistent.
  void Validate() const;

  std::size_t num_layers() const { return layers.size(); }
  std::size_t input_dim() const { return layers.front().fan_in; }
  std::size_t output_dim() const { return layers.back().fan_out; }
  // Width of the activation vector fed to layer l, including the bias slot.
  std::size_t activation_dim(std::size_t l) const {
    return layers[l].fan_in + (bias ? 1 : 0);
  }
  // Number of attributable parameters in layer l.
  std::size_t layer_param_count(std::size_t l) const {
    return activation_dim(l) * layers[l].fan_out;
  }
  std::size_t param_count() const;
  std::uint64_t Hash() const;

  // Convenience: input -> hidden... -> output.
  static ModelSpec Mlp(std::span<const std::size_t> widths,
                       Activation activation = Activation::kRelu,
                       bool bias = true,
                       LossKind loss = LossKind::kCrossEntropy);

  bool operator==(const ModelSpec&) const;
};

// Weight matrices W_l of shape activation_dim(l) x fan_out(l); the bias is the
// last row when ModelSpec::bias is set.
struct ModelParams {
  std::vector<Eigen::MatrixXd> weights;
  std::uint64_t step_index = 0;

  bool operator==(const ModelParams& other) const;
};

struct SampleBatch {
  RowMatrix inputs;  // one row per sample
  std::vector<int> labels;
  std::vector<std::uint64_t> sample_ids;

  std::size_t size() const { return labels.size(); }
};

// Per-layer activations and output derivatives for every sample of a batch.
// Row i of activations[l] is a^(i)_l (with the trailing 1 when biased), row i
// of output_grads[l] is d loss_i / d s^(i)_l.
struct BackpropCapture {
  std::vector<RowMatrix> activations;
  std::vector<RowMatrix> output_grads;
  std::vector<double> sample_losses;
  double mean_loss = 0.0;

  std::size_t batch_size() const { return sample_losses.size(); }
  std::size_t num_layers() const { return activations.size(); }
};

ModelParams InitModel(const ModelSpec& spec, std::uint64_t seed);

// One forward and one backward pass over the summed batch loss.
BackpropCapture ForwardBackward(const ModelSpec& spec, const ModelParams& params,
                                const SampleBatch& batch);

// outer(ds^(i), a^(i)) for every sample i of the batch; rows index outputs.
std::vector<Eigen::MatrixXd> PerSampleGrads(const BackpropCapture& capture,
                                            std::size_t layer);

// Gradient of the summed batch loss with respect to W_l (same shape as W_l).
std::vector<Eigen::MatrixXd> AggregateGrads(const BackpropCapture& capture);

// Row-major flattening of outer(ds, a): index o * a.size() + i.
Eigen::VectorXd FlattenOuter(const Eigen::Ref<const Eigen::VectorXd>& ds,
                             const Eigen::Ref<const Eigen::VectorXd>& a);

struct SingleSampleGrad {
  double loss = 0.0;
  // Per layer, flattened as FlattenOuter(ds, a).
  std::vector<Eigen::VectorXd> layers;
};

SingleSampleGrad LossAndGradSingle(const ModelSpec& spec,
                                   const ModelParams& params,
                                   const Eigen::Ref<const Eigen::VectorXd>& x,
                                   int label);

// Forward pass only; per-sample losses.
std::vector<double> SampleLosses(const ModelSpec& spec, const ModelParams& params,
                                 const RowMatrix& inputs,
                                 std::span<const int> labels);

// Network outputs (logits), one row per input.
RowMatrix Predict(const ModelSpec& spec, const ModelParams& params, const RowMatrix& inputs);
// Fraction of rows whose arg-max output equals the label.
double Accuracy(const ModelSpec& spec, const ModelParams& params, const RowMatrix& inputs,
                std::span<const int> labels);

// Parameter vector of layer l in the same order as FlattenOuter: entry
// o * activation_dim + i holds W_l(i, o).
Eigen::VectorXd FlattenLayerParams(const ModelParams& params, std::size_t layer);
Eigen::VectorXd FlattenParams(const ModelParams& params);
void UnflattenParams(const Eigen::Ref<const Eigen::VectorXd>& flat,
                     ModelParams& params);

// Checkpoint file: "DVEM", version, layer count, dims, then little-endian
// row-major f64 weights per layer.
std::string SerializeCheckpoint(const ModelSpec& spec, const ModelParams& params);
void ParseCheckpoint(std::string_view bytes, ModelSpec& spec, ModelParams& params);
void SaveCheckpoint(const std::filesystem::path& path, const ModelSpec& spec,
                    const ModelParams& params);
ModelParams LoadCheckpoint(const std::filesystem::path& path, ModelSpec* spec = nullptr);

}  // namespace dvemb

#endif  // DVEMB_MODEL_H_
