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

#include "dvemb/model.h"

#include <cmath>
#include <limits>

#include "dvemb/binary_io.h"
#include "dvemb/errors.h"
#include "dvemb/rng.h"

namespace dvemb {
namespace {

constexpr char kCheckpointMagic[4] = {'D', 'V', 'E', 'M'};
constexpr std::uint32_t kCheckpointVersion = 1;

RowMatrix WithBiasColumn(const RowMatrix& h, bool bias) {
  if (!bias) return h;
  RowMatrix a(h.rows(), h.cols() + 1);
  a.leftCols(h.cols()) = h;
  a.col(h.cols()).setOnes();
  return a;
}

void ApplyActivation(Activation activation, RowMatrix& s) {
  if (activation == Activation::kRelu) s = s.cwiseMax(0.0);
}

void CheckBatch(const ModelSpec& spec, const ModelParams& params,
                const RowMatrix& inputs, std::span<const int> labels) {
  Require(params.weights.size() == spec.num_layers(), ErrorKind::kInvalidArgument,
          "parameter layer count does not match spec");
  Require(static_cast<std::size_t>(inputs.cols()) == spec.input_dim(),
          ErrorKind::kInvalidArgument,
          "input dim " + std::to_string(inputs.cols()) + " does not match spec " +
              std::to_string(spec.input_dim()));
  Require(static_cast<std::size_t>(inputs.rows()) == labels.size(),
          ErrorKind::kInvalidArgument, "label count does not match input rows");
  Require(!labels.empty(), ErrorKind::kInvalidArgument, "empty batch");
  for (int y : labels) {
    Require(y >= 0 && static_cast<std::size_t>(y) < spec.output_dim(),
            ErrorKind::kInvalidArgument,
            "label " + std::to_string(y) + " out of range for output dim " +
                std::to_string(spec.output_dim()));
  }
}

// Forward pass keeping the biased activations and pre-activations of every
// layer.
struct ForwardState {
  std::vector<RowMatrix> activations;
  std::vector<RowMatrix> pre_activations;
};

ForwardState Forward(const ModelSpec& spec, const ModelParams& params,
                     const RowMatrix& inputs) {
  ForwardState state;
  const std::size_t num_layers = spec.num_layers();
  state.activations.reserve(num_layers);
  state.pre_activations.reserve(num_layers);
  RowMatrix h = inputs;
  for (std::size_t l = 0; l < num_layers; ++l) {
    state.activations.push_back(WithBiasColumn(h, spec.bias));
    RowMatrix s = state.activations.back() * params.weights[l];
    state.pre_activations.push_back(s);
    if (l + 1 < num_layers) {
      ApplyActivation(spec.activation, s);
      h = std::move(s);
    }
  }
  return state;
}

// Per-sample losses and d loss_i / d s for the output layer.
void OutputLoss(const ModelSpec& spec, const RowMatrix& logits,
                std::span<const int> labels, std::vector<double>& losses,
                RowMatrix* output_grad) {
  const Eigen::Index batch = logits.rows();
  const Eigen::Index classes = logits.cols();
  losses.assign(static_cast<std::size_t>(batch), 0.0);
  if (output_grad != nullptr) output_grad->resize(batch, classes);
  for (Eigen::Index i = 0; i < batch; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (spec.loss == LossKind::kCrossEntropy) {
      const double max_logit = logits.row(i).maxCoeff();
      Eigen::RowVectorXd shifted =
          (logits.row(i).array() - max_logit).exp().matrix();
      const double denom = shifted.sum();
      losses[static_cast<std::size_t>(i)] =
          std::log(denom) + max_logit - logits(i, y);
      if (output_grad != nullptr) {
        output_grad->row(i) = shifted / denom;
        (*output_grad)(i, y) -= 1.0;
      }
    } else {
      Eigen::RowVectorXd residual = logits.row(i);
      residual(y) -= 1.0;
      losses[static_cast<std::size_t>(i)] = 0.5 * residual.squaredNorm();
      if (output_grad != nullptr) output_grad->row(i) = residual;
    }
  }
}

}  // namespace

const char* ActivationName(Activation activation) {
  return activation == Activation::kRelu ? "relu" : "identity";
}

const char* LossName(LossKind loss) {
  return loss == LossKind::kCrossEntropy ? "cross_entropy" : "squared_error";
}

Activation ParseActivation(const std::string& name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "identity") return Activation::kIdentity;
  Fail(ErrorKind::kConfig, "unknown activation '" + name + "'");
}

LossKind ParseLoss(const std::string& name) {
  if (name == "cross_entropy") return LossKind::kCrossEntropy;
  if (name == "squared_error") return LossKind::kSquaredError;
  Fail(ErrorKind::kConfig, "unknown loss '" + name + "'");
}

void ModelSpec::Validate() const {
  Require(!layers.empty(), ErrorKind::kInvalidArgument,
          "model needs at least one layer");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Require(layers[l].fan_in > 0 && layers[l].fan_out > 0,
            ErrorKind::kInvalidArgument,
            "layer " + std::to_string(l) + " has a zero dimension");
    if (l + 1 < layers.size()) {
      Require(layers[l].fan_out == layers[l + 1].fan_in,
              ErrorKind::kInvalidArgument,
              "dim mismatch: layer " + std::to_string(l) + " fan_out " +
                  std::to_string(layers[l].fan_out) + " != layer " +
                  std::to_string(l + 1) + " fan_in " +
                  std::to_string(layers[l + 1].fan_in));
    }
  }
  if (loss == LossKind::kCrossEntropy) {
    Require(output_dim() >= 2, ErrorKind::kInvalidArgument,
            "cross_entropy needs at least two outputs");
  }
}

std::size_t ModelSpec::param_count() const {
  std::size_t total = 0;
  for (std::size_t l = 0; l < layers.size(); ++l) total += layer_param_count(l);
  return total;
}

std::uint64_t ModelSpec::Hash() const {
  Fnv1a h;
  h.Update("ModelSpec/v1");
  h.UpdateValue(static_cast<std::uint64_t>(layers.size()));
  for (const LayerDims& d : layers) {
    h.UpdateValue(static_cast<std::uint64_t>(d.fan_in));
    h.UpdateValue(static_cast<std::uint64_t>(d.fan_out));
  }
  h.UpdateValue(static_cast<std::uint8_t>(activation));
  h.UpdateValue(static_cast<std::uint8_t>(bias));
  h.UpdateValue(static_cast<std::uint8_t>(loss));
  return h.digest();
}

ModelSpec ModelSpec::Mlp(std::span<const std::size_t> widths,
                         Activation activation, bool bias, LossKind loss) {
  ModelSpec spec;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    spec.layers.push_back({widths[i], widths[i + 1]});
  }
  spec.activation = activation;
  spec.bias = bias;
  spec.loss = loss;
  return spec;
}

bool ModelSpec::operator==(const ModelSpec& other) const {
  if (layers.size() != other.layers.size()) return false;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (layers[l].fan_in != other.layers[l].fan_in ||
        layers[l].fan_out != other.layers[l].fan_out) {
      return false;
    }
  }
  return activation == other.activation && bias == other.bias &&
         loss == other.loss;
}

bool ModelParams::operator==(const ModelParams& other) const {
  if (weights.size() != other.weights.size()) return false;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (weights[l].rows() != other.weights[l].rows() ||
        weights[l].cols() != other.weights[l].cols() ||
        weights[l] != other.weights[l]) {
      return false;
    }
  }
  return step_index == other.step_index;
}

ModelParams InitModel(const ModelSpec& spec, std::uint64_t seed) {
  spec.Validate();
  ModelParams params;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const auto fan_in = static_cast<Eigen::Index>(spec.layers[l].fan_in);
    const auto fan_out = static_cast<Eigen::Index>(spec.layers[l].fan_out);
    // Uniform(-b, b) with b = sqrt(6 / fan_in) has variance 2 / fan_in.
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    Rng rng(DeriveSeed(seed, l));
    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(
        static_cast<Eigen::Index>(spec.activation_dim(l)), fan_out);
    for (Eigen::Index i = 0; i < fan_in; ++i) {
      for (Eigen::Index o = 0; o < fan_out; ++o) {
        w(i, o) = (2.0 * rng.Uniform() - 1.0) * bound;
      }
    }
    params.weights.push_back(std::move(w));
  }
  return params;
}

BackpropCapture ForwardBackward(const ModelSpec& spec, const ModelParams& params,
                                const SampleBatch& batch) {
  CheckBatch(spec, params, batch.inputs, batch.labels);
  ForwardState state = Forward(spec, params, batch.inputs);

  BackpropCapture capture;
  const std::size_t num_layers = spec.num_layers();
  capture.output_grads.resize(num_layers);
  OutputLoss(spec, state.pre_activations.back(), batch.labels,
             capture.sample_losses, &capture.output_grads.back());

  double total = 0.0;
  for (double v : capture.sample_losses) total += v;
  capture.mean_loss = total / static_cast<double>(capture.sample_losses.size());
  if (!std::isfinite(capture.mean_loss)) {
    throw DivergenceError(params.step_index, "non-finite loss");
  }

  for (std::size_t l = num_layers - 1; l > 0; --l) {
    const auto fan_in = static_cast<Eigen::Index>(spec.layers[l].fan_in);
    RowMatrix upstream =
        capture.output_grads[l] * params.weights[l].topRows(fan_in).transpose();
    if (spec.activation == Activation::kRelu) {
      // Subgradient at 0 is 0.
      upstream.array() *=
          (state.pre_activations[l - 1].array() > 0.0).cast<double>();
    }
    capture.output_grads[l - 1] = std::move(upstream);
  }
  capture.activations = std::move(state.activations);
  return capture;
}

std::vector<Eigen::MatrixXd> PerSampleGrads(const BackpropCapture& capture,
                                            std::size_t layer) {
  Require(layer < capture.num_layers(), ErrorKind::kInvalidArgument,
          "layer " + std::to_string(layer) + " out of range");
  const RowMatrix& a = capture.activations[layer];
  const RowMatrix& ds = capture.output_grads[layer];
  std::vector<Eigen::MatrixXd> grads;
  grads.reserve(static_cast<std::size_t>(a.rows()));
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    grads.push_back(ds.row(i).transpose() * a.row(i));
  }
  return grads;
}

std::vector<Eigen::MatrixXd> AggregateGrads(const BackpropCapture& capture) {
  std::vector<Eigen::MatrixXd> grads;
  grads.reserve(capture.num_layers());
  for (std::size_t l = 0; l < capture.num_layers(); ++l) {
    grads.push_back(capture.activations[l].transpose() * capture.output_grads[l]);
  }
  return grads;
}

Eigen::VectorXd FlattenOuter(const Eigen::Ref<const Eigen::VectorXd>& ds,
                             const Eigen::Ref<const Eigen::VectorXd>& a) {
  Eigen::VectorXd flat(ds.size() * a.size());
  for (Eigen::Index o = 0; o < ds.size(); ++o) {
    flat.segment(o * a.size(), a.size()) = ds(o) * a;
  }
  return flat;
}

SingleSampleGrad LossAndGradSingle(const ModelSpec& spec,
                                   const ModelParams& params,
                                   const Eigen::Ref<const Eigen::VectorXd>& x,
                                   int label) {
  SampleBatch batch;
  batch.inputs = x.transpose();
  batch.labels = {label};
  batch.sample_ids = {0};
  BackpropCapture capture = ForwardBackward(spec, params, batch);
  SingleSampleGrad out;
  out.loss = capture.sample_losses.front();
  for (std::size_t l = 0; l < capture.num_layers(); ++l) {
    out.layers.push_back(FlattenOuter(capture.output_grads[l].row(0).transpose(),
                                      capture.activations[l].row(0).transpose()));
  }
  return out;
}

std::vector<double> SampleLosses(const ModelSpec& spec, const ModelParams& params,
                                 const RowMatrix& inputs,
                                 std::span<const int> labels) {
  CheckBatch(spec, params, inputs, labels);
  ForwardState state = Forward(spec, params, inputs);
  std::vector<double> losses;
  OutputLoss(spec, state.pre_activations.back(), labels, losses, nullptr);
  return losses;
}

RowMatrix Predict(const ModelSpec& spec, const ModelParams& params,
                  const RowMatrix& inputs) {
  std::vector<int> labels(static_cast<std::size_t>(inputs.rows()), 0);
  CheckBatch(spec, params, inputs, labels);
  return Forward(spec, params, inputs).pre_activations.back();
}

double Accuracy(const ModelSpec& spec, const ModelParams& params, const RowMatrix& inputs,
                std::span<const int> labels) {
  Require(!labels.empty(), ErrorKind::kInvalidArgument, "accuracy of an empty set");
  const RowMatrix outputs = Predict(spec, params, inputs);
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < outputs.rows(); ++i) {
    Eigen::Index best = 0;
    outputs.row(i).maxCoeff(&best);
    if (best == labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

Eigen::VectorXd FlattenLayerParams(const ModelParams& params, std::size_t layer) {
  const Eigen::MatrixXd& w = params.weights.at(layer);
  Eigen::VectorXd flat(w.size());
  for (Eigen::Index o = 0; o < w.cols(); ++o) {
    flat.segment(o * w.rows(), w.rows()) = w.col(o);
  }
  return flat;
}

Eigen::VectorXd FlattenParams(const ModelParams& params) {
  Eigen::Index total = 0;
  for (const auto& w : params.weights) total += w.size();
  Eigen::VectorXd flat(total);
  Eigen::Index offset = 0;
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    const Eigen::Index n = params.weights[l].size();
    flat.segment(offset, n) = FlattenLayerParams(params, l);
    offset += n;
  }
  return flat;
}

void UnflattenParams(const Eigen::Ref<const Eigen::VectorXd>& flat,
                     ModelParams& params) {
  Eigen::Index offset = 0;
  for (auto& w : params.weights) {
    for (Eigen::Index o = 0; o < w.cols(); ++o) {
      w.col(o) = flat.segment(offset + o * w.rows(), w.rows());
    }
    offset += w.size();
  }
  Require(offset == flat.size(), ErrorKind::kInvalidArgument,
          "flat parameter vector has wrong length");
}

std::string SerializeCheckpoint(const ModelSpec& spec, const ModelParams& params) {
  ByteWriter out;
  out.PutBytes(std::string_view(kCheckpointMagic, 4));
  out.PutU32(kCheckpointVersion);
  out.PutU32(static_cast<std::uint32_t>(spec.num_layers()));
  out.PutU8(static_cast<std::uint8_t>(spec.activation));
  out.PutU8(spec.bias ? 1 : 0);
  out.PutU8(static_cast<std::uint8_t>(spec.loss));
  out.PutU8(0);
  out.PutU64(params.step_index);
  for (const LayerDims& d : spec.layers) {
    out.PutU64(d.fan_in);
    out.PutU64(d.fan_out);
  }
  for (const auto& w : params.weights) {
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) out.PutF64(w(r, c));
    }
  }
  return out.bytes();
}

void ParseCheckpoint(std::string_view bytes, ModelSpec& spec, ModelParams& params) {
  ByteReader in(bytes);
  const std::string_view magic = in.GetBytes(4);
  Require(magic == std::string_view(kCheckpointMagic, 4), ErrorKind::kFormat,
          "bad checkpoint magic");
  const std::uint32_t version = in.GetU32();
  Require(version == kCheckpointVersion, ErrorKind::kFormat,
          "unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t num_layers = in.GetU32();
  spec = ModelSpec{};
  spec.activation = static_cast<Activation>(in.GetU8());
  spec.bias = in.GetU8() != 0;
  spec.loss = static_cast<LossKind>(in.GetU8());
  in.GetU8();
  params = ModelParams{};
  params.step_index = in.GetU64();
  for (std::uint32_t l = 0; l < num_layers; ++l) {
    LayerDims d;
    d.fan_in = in.GetU64();
    d.fan_out = in.GetU64();
    spec.layers.push_back(d);
  }
  spec.Validate();
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    Eigen::MatrixXd w(static_cast<Eigen::Index>(spec.activation_dim(l)),
                      static_cast<Eigen::Index>(spec.layers[l].fan_out));
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = in.GetF64();
    }
    params.weights.push_back(std::move(w));
  }
  Require(in.remaining() == 0, ErrorKind::kFormat,
          "trailing bytes in checkpoint");
}

void SaveCheckpoint(const std::filesystem::path& path, const ModelSpec& spec,
                    const ModelParams& params) {
  WriteFileBytes(path, SerializeCheckpoint(spec, params));
}

ModelParams LoadCheckpoint(const std::filesystem::path& path, ModelSpec* spec) {
  ModelSpec parsed_spec;
  ModelParams params;
  ParseCheckpoint(ReadFileBytes(path), parsed_spec, params);
  if (spec != nullptr) *spec = parsed_spec;
  return params;
}

}  // namespace dvemb
