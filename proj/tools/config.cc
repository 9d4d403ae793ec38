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


#include "config.h"

#include <cstdlib>
#include <set>

#include <json.hpp>

#include "dvemb/baselines.h"
#include "dvemb/binary_io.h"
#include "dvemb/errors.h"
#include "dvemb/model.h"
#include "dvemb/schedule.h"

namespace dvemb::cli {
namespace {

using nlohmann::json;

[[noreturn]] void ConfigError(const std::string& message) {
  Fail(ErrorKind::kConfig, "config: " + message);
}

// Reads fields of one JSON object and rejects whatever was not read.
class Section {
 public:
  Section(const json& value, std::string path) : value_(value), path_(std::move(path)) {
    if (!value_.is_object()) ConfigError(Name() + " must be an object");
  }

  bool Has(const std::string& key) const { return value_.contains(key); }

  const json* Find(const std::string& key) {
    seen_.insert(key);
    auto it = value_.find(key);
    return it == value_.end() ? nullptr : &*it;
  }

  template <typename T>
  void Unsigned(const std::string& key, T& out) {
    if (const json* v = Find(key)) {
      if (!v->is_number_integer() || v->get<std::int64_t>() < 0) {
        ConfigError(Key(key) + " must be a non-negative integer");
      }
      out = static_cast<T>(v->get<std::uint64_t>());
    }
  }

  void Real(const std::string& key, double& out) {
    if (const json* v = Find(key)) {
      if (!v->is_number()) ConfigError(Key(key) + " must be a number");
      out = v->get<double>();
    }
  }

  void Bool(const std::string& key, bool& out) {
    if (const json* v = Find(key)) {
      if (!v->is_boolean()) ConfigError(Key(key) + " must be a boolean");
      out = v->get<bool>();
    }
  }

  void Text(const std::string& key, std::string& out) {
    if (const json* v = Find(key)) {
      if (!v->is_string()) ConfigError(Key(key) + " must be a string");
      out = v->get<std::string>();
    }
  }

  Section Child(const std::string& key) {
    const json* v = Find(key);
    static const json kEmpty = json::object();
    return Section(v ? *v : kEmpty, Key(key));
  }

  std::string Key(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  void Finish() const {
    for (auto it = value_.begin(); it != value_.end(); ++it) {
      if (!seen_.contains(it.key())) ConfigError("unknown key '" + Key(it.key()) + "'");
    }
  }

 private:
  std::string Name() const { return path_.empty() ? "config" : "'" + path_ + "'"; }

  const json& value_;
  std::string path_;
  std::set<std::string> seen_;
};

std::filesystem::path Resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  if (path.is_relative() && !base.empty()) return base / path;
  return path;
}

void ParseIdx(Section s, const std::filesystem::path& base, IdxSource& out) {
  std::string images, labels;
  s.Text("images", images);
  s.Text("labels", labels);
  s.Unsigned("offset", out.offset);
  s.Unsigned("limit", out.limit);
  s.Finish();
  if (images.empty() || labels.empty()) {
    ConfigError(s.Key("images") + " and " + s.Key("labels") + " are required");
  }
  out.images = Resolve(base, images);
  out.labels = Resolve(base, labels);
}

void ParseDataset(Section s, const std::filesystem::path& base, DatasetConfig& out) {
  std::string source = "synthetic";
  s.Text("source", source);
  if (source == "synthetic") {
    out.synthetic = true;
    Section syn = s.Child("synthetic");
    SynthOptions& o = out.train;
    syn.Unsigned("seed", o.seed);
    syn.Unsigned("n", o.n);
    syn.Unsigned("dim", o.dim);
    syn.Unsigned("classes", o.classes);
    syn.Real("label_noise", o.label_noise);
    syn.Unsigned("cluster_seed", o.cluster_seed);
    syn.Real("separation", o.separation);
    syn.Real("noise_std", o.noise_std);
    syn.Unsigned("latent_dim", o.latent_dim);
    syn.Finish();
    Section val = s.Child("validation");
    val.Unsigned("seed", out.validation_seed);
    val.Unsigned("n", out.validation_n);
    val.Finish();
    if (o.n == 0 || o.dim == 0 || o.classes < 2) {
      ConfigError("dataset.synthetic needs n >= 1, dim >= 1 and classes >= 2");
    }
    if (!(o.label_noise >= 0.0 && o.label_noise < 1.0)) {
      ConfigError("dataset.synthetic.label_noise must lie in [0, 1)");
    }
    if (out.validation_n == 0) ConfigError("dataset.validation.n must be positive");
  } else if (source == "idx") {
    out.synthetic = false;
    ParseIdx(s.Child("train"), base, out.train_idx);
    ParseIdx(s.Child("validation"), base, out.validation_idx);
    s.Bool("normalize", out.normalize);
  } else {
    ConfigError("dataset.source must be 'synthetic' or 'idx', got '" + source + "'");
  }
  s.Finish();
}

std::size_t CheckWidth(std::size_t r, const std::string& key) {
  if (r == 0) ConfigError(key + " must be positive");
  return r;
}

}  // namespace

ModelSpec ExperimentConfig::Spec() const {
  ModelSpec spec = ModelSpec::Mlp(widths, ParseActivation(activation), bias, ParseLoss(loss));
  return spec;
}

PlanOptions ExperimentConfig::Plan() const {
  PlanOptions plan;
  plan.spec = Spec();
  plan.init_seed = init_seed;
  plan.shuffle_seed = shuffle_seed;
  plan.batch_size = batch_size;
  plan.epochs = epochs;
  plan.max_steps = max_steps;
  plan.schedule = schedule;
  if (lr_reduction == "mean") {
    plan.schedule.eta_max /= static_cast<double>(batch_size);
    plan.schedule.c /= static_cast<double>(batch_size);
  }
  plan.checkpoint_count = checkpoints;
  return plan;
}

ProjectionPair ExperimentConfig::Projections() const {
  ModelSpec spec = Spec();
  if (projection.identity) return MakeIdentityProjections(spec);
  if (!projection.layers.empty()) {
    return MakeProjections(projection.seed, spec, projection.layers);
  }
  return MakeProjections(projection.seed, spec, projection.r_a, projection.r_s);
}

ExperimentConfig ParseConfig(const std::string& text, const std::filesystem::path& base_dir) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    ConfigError(std::string("invalid JSON: ") + e.what());
  }
  ExperimentConfig c;
  Section s(root, "");

  ParseDataset(s.Child("dataset"), base_dir, c.dataset);

  {
    Section m = s.Child("model");
    if (const json* w = m.Find("widths")) {
      if (!w->is_array() || w->size() < 2) {
        ConfigError("model.widths must be an array of at least two widths");
      }
      for (const json& v : *w) {
        if (!v.is_number_integer() || v.get<std::int64_t>() <= 0) {
          ConfigError("model.widths entries must be positive integers");
        }
        c.widths.push_back(v.get<std::size_t>());
      }
    } else {
      ConfigError("model.widths is required");
    }
    m.Text("activation", c.activation);
    m.Bool("bias", c.bias);
    m.Text("loss", c.loss);
    m.Finish();
  }

  {
    Section sc = s.Child("schedule");
    std::string kind = "constant";
    sc.Text("kind", kind);
    c.schedule.kind = ParseScheduleKind(kind);
    sc.Real("eta_max", c.schedule.eta_max);
    sc.Unsigned("warmup_steps", c.schedule.warmup_steps);
    sc.Real("c", c.schedule.c);
    sc.Text("lr_reduction", c.lr_reduction);
    sc.Finish();
    if (c.lr_reduction != "sum" && c.lr_reduction != "mean") {
      ConfigError("schedule.lr_reduction must be 'sum' or 'mean'");
    }
    if (!(c.schedule.eta_max >= 0.0) || !(c.schedule.c >= 0.0)) {
      ConfigError("schedule rates must be non-negative");
    }
  }

  {
    Section t = s.Child("training");
    t.Unsigned("batch_size", c.batch_size);
    t.Unsigned("epochs", c.epochs);
    t.Unsigned("max_steps", c.max_steps);
    t.Unsigned("init_seed", c.init_seed);
    t.Unsigned("shuffle_seed", c.shuffle_seed);
    t.Finish();
    if (c.batch_size == 0 || c.epochs == 0) {
      ConfigError("training.batch_size and training.epochs must be positive");
    }
  }

  {
    Section p = s.Child("projection");
    p.Bool("identity", c.projection.identity);
    p.Unsigned("seed", c.projection.seed);
    p.Unsigned("r_a", c.projection.r_a);
    p.Unsigned("r_s", c.projection.r_s);
    if (const json* layers = p.Find("layers")) {
      if (!layers->is_array()) ConfigError("projection.layers must be an array");
      for (const json& l : *layers) {
        if (!l.is_array() || l.size() != 2 || !l[0].is_number_integer() ||
            !l[1].is_number_integer()) {
          ConfigError("projection.layers entries must be [r_a, r_s] pairs");
        }
        c.projection.layers.emplace_back(
            CheckWidth(l[0].get<std::size_t>(), "projection.layers r_a"),
            CheckWidth(l[1].get<std::size_t>(), "projection.layers r_s"));
      }
      if (c.projection.layers.size() != c.widths.size() - 1) {
        ConfigError("projection.layers needs one entry per model layer");
      }
    }
    p.Finish();
    CheckWidth(c.projection.r_a, "projection.r_a");
    CheckWidth(c.projection.r_s, "projection.r_s");
  }

  s.Unsigned("checkpoints", c.checkpoints);
  if (c.checkpoints == 0) ConfigError("checkpoints must be positive");

  {
    Section p = s.Child("probes");
    p.Unsigned("count", c.probes.count);
    p.Unsigned("seed", c.probes.seed);
    p.Unsigned("validation_count", c.probes.validation_count);
    if (const json* modes = p.Find("modes")) {
      if (!modes->is_array() || modes->empty()) {
        ConfigError("probes.modes must be a non-empty array");
      }
      c.probes.modes.clear();
      for (const json& m : *modes) {
        if (!m.is_string()) ConfigError("probes.modes entries must be strings");
        std::string name = m.get<std::string>();
        try {
          ParseRemovalMode(name);
        } catch (const Error&) {
          ConfigError("probes.modes: unknown mode '" + name + "'");
        }
        c.probes.modes.push_back(name);
      }
    }
    p.Finish();
    if (c.probes.validation_count == 0) ConfigError("probes.validation_count must be positive");
  }

  {
    Section inf = s.Child("influence");
    inf.Real("damping", c.damping);
    inf.Finish();
    if (!(c.damping >= 0.0)) ConfigError("influence.damping must be non-negative");
  }

  std::string out;
  s.Text("output_dir", out);
  if (!out.empty()) c.output_dir = out;
  s.Finish();

  try {
    c.Spec().Validate();
    if (c.dataset.synthetic && c.widths.front() != c.dataset.train.dim) {
      ConfigError("model.widths[0] must equal dataset.synthetic.dim");
    }
    MakeSchedule(c.Plan().schedule, 1 + c.schedule.warmup_steps);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kConfig) throw;
    ConfigError(e.what());
  }
  c.canonical = root.dump();
  return c;
}

ExperimentConfig LoadConfig(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    Fail(ErrorKind::kConfig, "config file not found: " + path.string());
  }
  return ParseConfig(ReadFileBytes(path), path.parent_path());
}

std::filesystem::path OutputDir(const ExperimentConfig& config) {
  if (const char* env = std::getenv("DVE_OUT"); env != nullptr && *env != '\0') {
    return std::filesystem::path(env);
  }
  return config.output_dir;
}

Datasets BuildDatasets(const ExperimentConfig& config) {
  const DatasetConfig& d = config.dataset;
  Datasets out;
  if (d.synthetic) {
    out.train = SynthDataset(d.train);
    SynthOptions val = d.train;
    val.seed = d.validation_seed;
    val.n = d.validation_n;
    val.label_noise = 0.0;
    out.validation = SynthDataset(val);
  } else {
    for (const IdxSource* src : {&d.train_idx, &d.validation_idx}) {
      if (!std::filesystem::exists(src->images) || !std::filesystem::exists(src->labels)) {
        Fail(ErrorKind::kMissingArtifact,
             "IDX files not found: " + src->images.string() + ", " + src->labels.string());
      }
    }
    out.train = LoadIdx(d.train_idx.images, d.train_idx.labels, d.train_idx.limit,
                        d.normalize, d.train_idx.offset);
    out.validation = LoadIdx(d.validation_idx.images, d.validation_idx.labels,
                             d.validation_idx.limit, d.normalize, d.validation_idx.offset);
    if (out.train.dim() != config.widths.front()) {
      ConfigError("model.widths[0] does not match the IDX image size");
    }
  }
  return out;
}

}  // namespace dvemb::cli
