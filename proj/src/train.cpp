#include "skelmamba/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace skelmamba {

double lr_at_epoch(const TrainConfig& cfg, int epoch) {
  double lr = cfg.lr;
  for (int m : cfg.lr_milestones) {
    if (epoch >= m) lr *= cfg.lr_gamma;
  }
  return lr;
}

Sgd::Sgd(std::vector<Model::Param> params, double momentum,
         double weight_decay)
    : params_(std::move(params)),
      momentum_(momentum),
      weight_decay_(weight_decay) {
  velocity_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    velocity_[i].assign(params_[i].tensor.numel(), 0.0);
  }
}

void Sgd::zero_grad() {
  for (auto& p : params_) p.tensor.clear_grad();
}

double Sgd::clip_gradients(double max_norm) {
  double sq = 0.0;
  for (auto& p : params_) {
    Tensor g = p.tensor.grad();
    if (!g.defined()) continue;
    const double* gd = g.data();
    for (int64_t k = 0; k < g.numel(); ++k) sq += gd[k] * gd[k];
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / (norm + 1e-12);
    for (auto& p : params_) {
      auto node = p.tensor.node();
      if (node->grad.size() != node->value.size()) continue;
      for (double& v : node->grad) v *= scale;
    }
  }
  return norm;
}

void Sgd::step(double lr) {
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    Tensor g = p.tensor.grad();
    if (!g.defined()) continue;
    double* w = p.tensor.data();
    const double* gd = g.data();
    double* v = velocity_[i].data();
    const double wd = p.decay ? weight_decay_ : 0.0;
    const int64_t n = p.tensor.numel();
    for (int64_t k = 0; k < n; ++k) {
      const double grad = gd[k] + wd * w[k];
      v[k] = momentum_ * v[k] + grad;
      w[k] -= lr * v[k];
    }
    apply_precision(w, n);
  }
}

// ------------------------------------------------------------------ batching

BatchInputs make_batch(const std::vector<const SkeletonSequence*>& samples,
                       StreamKind stream, const SkeletonTopology& topology,
                       int64_t frames, ResampleMode mode, Rng* rng) {
  if (samples.empty()) throw DataError("make_batch: empty batch");
  const int64_t persons = samples[0]->n_persons;
  const int64_t J = samples[0]->n_joints;
  std::vector<double> buf;
  buf.reserve(size_t(samples.size()) * persons * 3 * frames * J);
  BatchInputs out;
  out.persons = persons;
  for (const auto* s : samples) {
    if (s->n_persons != persons || s->n_joints != J) {
      throw DataError("make_batch: inhomogeneous batch");
    }
    SkeletonSequence centered = center_sequence(*s, topology.center_joint);
    SkeletonSequence sampled = resample_frames(centered, frames, mode, rng);
    SkeletonSequence streamed = derive_stream(sampled, stream, topology);
    Tensor t = to_model_input(streamed);  // (P,3,T,N)
    buf.insert(buf.end(), t.values().begin(), t.values().end());
    out.labels.push_back(s->label);
  }
  const int64_t B = static_cast<int64_t>(samples.size());
  out.input =
      Tensor::from_data({B * persons, 3, frames, J}, std::move(buf));
  return out;
}

Tensor person_mean_logits(const Tensor& logits, int64_t persons) {
  if (persons == 1) return logits;
  const int64_t rows = logits.dim(0), K = logits.dim(1);
  Tensor grouped = reshape(logits, {rows / persons, persons, K});
  return mean(grouped, 1);
}

namespace {

int argmax_row(const double* p, int64_t k) {
  int best = 0;
  for (int64_t i = 1; i < k; ++i) {
    if (p[i] > p[best]) best = int(i);
  }
  return best;
}

double batch_accuracy(const Tensor& sample_logits,
                      const std::vector<int>& labels) {
  const int64_t B = sample_logits.dim(0), K = sample_logits.dim(1);
  int correct = 0;
  for (int64_t b = 0; b < B; ++b) {
    if (argmax_row(sample_logits.data() + b * K, K) == labels[b]) ++correct;
  }
  return double(correct) / double(B);
}

}  // namespace

double evaluate_accuracy(Model& model, const Dataset& data) {
  const bool was_training = model.training;
  model.training = false;
  NoGradGuard ng;
  int correct = 0;
  const int64_t batch_size = 64;
  for (size_t i = 0; i < data.samples.size(); i += batch_size) {
    std::vector<const SkeletonSequence*> batch;
    for (size_t j = i; j < std::min(i + batch_size, data.samples.size()); ++j) {
      batch.push_back(&data.samples[j]);
    }
    BatchInputs in = make_batch(batch, model.cfg.stream, model.topology,
                                model.cfg.frames, ResampleMode::eval_full,
                                nullptr);
    Tensor logits = person_mean_logits(model.forward(in.input), in.persons);
    const int64_t K = logits.dim(1);
    for (int64_t b = 0; b < logits.dim(0); ++b) {
      if (argmax_row(logits.data() + b * K, K) == in.labels[b]) ++correct;
    }
  }
  model.training = was_training;
  return double(correct) / double(data.samples.size());
}

// ------------------------------------------------------------------ training

TrainResult train(Model& model, const Dataset& train_data,
                  const Dataset& eval_data, const TrainConfig& cfg,
                  const std::string& out_dir, Model* teacher,
                  const DkdLoss* kd) {
  if (train_data.samples.empty()) throw DataError("train: empty dataset");
  for (const auto& s : train_data.samples) {
    if (s.label < 0 || s.label >= model.cfg.n_classes) {
      throw DataError("train: label " + std::to_string(s.label) +
                      " outside [0," + std::to_string(model.cfg.n_classes) +
                      ")");
    }
  }
  set_default_precision(cfg.precision == "f64" ? Precision::f64
                                               : Precision::f32);

  TrainResult result;
  Sgd opt(model.parameters(), cfg.momentum, cfg.weight_decay);
  Rng master(cfg.seed);

  std::ofstream metrics;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    metrics.open(out_dir + "/metrics.jsonl", std::ios::app);
  }

  const double t_start = now_seconds();
  std::vector<size_t> order(train_data.samples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at_epoch(cfg, epoch);
    Rng erng = master.fork("epoch" + std::to_string(epoch));
    erng.shuffle(order);

    model.training = true;
    double loss_sum = 0.0;
    double acc_sum = 0.0;
    int n_batches = 0;
    bool nan_hit = false;

    for (size_t i = 0; i < order.size() && !nan_hit; i += cfg.batch) {
      std::vector<const SkeletonSequence*> batch;
      for (size_t j = i; j < std::min(i + size_t(cfg.batch), order.size());
           ++j) {
        batch.push_back(&train_data.samples[order[j]]);
      }
      Rng brng = erng.fork("batch" + std::to_string(i));
      BatchInputs in =
          make_batch(batch, model.cfg.stream, model.topology, model.cfg.frames,
                     ResampleMode::train_random_crop, &brng);

      opt.zero_grad();
      try {
        Tensor logits =
            person_mean_logits(model.forward(in.input), in.persons);
        Tensor loss = cross_entropy(logits, in.labels);
        if (teacher && kd) {
          Tensor teacher_logits;
          {
            NoGradGuard ng;
            const bool tw = teacher->training;
            teacher->training = false;
            teacher_logits =
                person_mean_logits(teacher->forward(in.input), in.persons);
            teacher->training = tw;
          }
          // the distillation term dwarfs the label loss at init; ramp it
          // in so the student first finds the label signal
          double ramp = 1.0;
          if (cfg.kd_warmup_epochs > 0) {
            ramp = std::min(1.0, double(epoch + 1) / cfg.kd_warmup_epochs);
          }
          Tensor kd_term = dkd_loss(logits, teacher_logits, in.labels, *kd);
          loss = add(loss, mul_scalar(kd_term, ramp));
        }
        const double loss_v = loss.item();
        if (!std::isfinite(loss_v)) {
          nan_hit = true;  // abort, keep the last good checkpoint
          result.aborted_nan = true;
          break;
        }
        backward(loss);
        if (cfg.clip_grad_norm > 0.0) opt.clip_gradients(cfg.clip_grad_norm);
        opt.step(lr);
        loss_sum += loss_v;
        acc_sum += batch_accuracy(logits, in.labels);
        ++n_batches;
      } catch (const NumericError&) {
        // diverged weights surface as numeric failures mid-forward;
        // treated the same as a non-finite loss
        nan_hit = true;
        result.aborted_nan = true;
        break;
      }
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = n_batches ? loss_sum / n_batches : 0.0;
    rec.train_acc = n_batches ? acc_sum / n_batches : 0.0;
    if (!nan_hit && !eval_data.samples.empty()) {
      try {
        rec.eval_acc = evaluate_accuracy(model, eval_data);
      } catch (const NumericError&) {
        nan_hit = true;
        result.aborted_nan = true;
      }
    }
    rec.wall_s = now_seconds() - t_start;
    result.log.push_back(rec);

    if (metrics.is_open()) {
      json j;
      j["epoch"] = rec.epoch;
      j["lr"] = rec.lr;
      j["train_loss"] = rec.train_loss;
      j["train_acc"] = rec.train_acc;
      j["eval_acc"] = rec.eval_acc;
      j["wall_s"] = rec.wall_s;
      metrics << j.dump() << "\n";
      metrics.flush();
    }

    if (rec.eval_acc >= result.best_eval_acc &&
        !(nan_hit && result.log.size() <= 1)) {
      result.best_eval_acc = rec.eval_acc;
      if (!out_dir.empty() && !nan_hit) {
        result.best_checkpoint = out_dir + "/checkpoint_best";
        save_checkpoint(model, result.best_checkpoint);
      }
    }
    if (nan_hit) break;
  }
  model.training = false;
  return result;
}

CpkdResult train_cpkd(Model& teacher, Model& student,
                      const Dataset& train_data, const Dataset& eval_data,
                      const TrainConfig& teacher_cfg,
                      const TrainConfig& student_cfg, const DkdLoss& kd,
                      const std::string& out_dir) {
  if (teacher.cfg.head_kind != HeadKind::cov_pool) {
    throw ConfigError("train_cpkd: teacher head must be cov_pool");
  }
  if (student.cfg.head_kind != HeadKind::gap) {
    throw ConfigError("train_cpkd: student head must be gap");
  }
  ModelConfig a = teacher.cfg, b = student.cfg;
  a.head_kind = b.head_kind = HeadKind::gap;
  if (config_to_json(a) != config_to_json(b)) {
    throw ConfigError(
        "train_cpkd: teacher and student backbones must match exactly");
  }

  CpkdResult r;
  r.teacher = train(teacher, train_data, eval_data, teacher_cfg,
                    out_dir.empty() ? "" : out_dir + "/teacher");
  r.teacher_signature_before = teacher.weights_signature();
  r.student = train(student, train_data, eval_data, student_cfg,
                    out_dir.empty() ? "" : out_dir + "/student", &teacher, &kd);
  r.teacher_signature_after = teacher.weights_signature();
  return r;
}

// ---------------------------------------------------------------- evaluation

EvalReport evaluate(std::vector<Model*> models,
                    const std::vector<StreamKind>& streams,
                    const Dataset& data) {
  if (models.size() != streams.size() || models.empty()) {
    throw ConfigError("evaluate: one model per stream required");
  }
  const int K = models[0]->cfg.n_classes;
  NoGradGuard ng;

  EvalReport rep;
  rep.confusion.assign(K, std::vector<int>(K, 0));
  rep.per_class_acc.assign(K, 0.0);
  rep.per_class_count.assign(K, 0);
  std::vector<int> stream_correct(streams.size(), 0);
  int fused_correct = 0;

  const int64_t batch_size = 64;
  for (size_t i = 0; i < data.samples.size(); i += batch_size) {
    std::vector<const SkeletonSequence*> batch;
    for (size_t j = i; j < std::min(i + batch_size, data.samples.size()); ++j) {
      batch.push_back(&data.samples[j]);
    }
    std::vector<Tensor> per_stream;
    std::vector<int> labels;
    for (size_t m = 0; m < models.size(); ++m) {
      Model& model = *models[m];
      const bool was = model.training;
      model.training = false;
      BatchInputs in = make_batch(batch, streams[m], model.topology,
                                  model.cfg.frames, ResampleMode::eval_full,
                                  nullptr);
      Tensor logits = person_mean_logits(model.forward(in.input), in.persons);
      per_stream.push_back(logits);
      labels = in.labels;
      model.training = was;
      for (int64_t bi = 0; bi < logits.dim(0); ++bi) {
        if (argmax_row(logits.data() + bi * K, K) == labels[bi]) {
          stream_correct[m]++;
        }
      }
    }
    Tensor fused = fuse_scores(per_stream);
    for (int64_t bi = 0; bi < fused.dim(0); ++bi) {
      const int pred = argmax_row(fused.data() + bi * K, K);
      const int truth = labels[bi];
      rep.confusion[truth][pred]++;
      rep.per_class_count[truth]++;
      if (pred == truth) {
        fused_correct++;
        rep.per_class_acc[truth] += 1.0;
      }
    }
  }

  for (int c = 0; c < K; ++c) {
    if (rep.per_class_count[c] > 0) {
      rep.per_class_acc[c] /= rep.per_class_count[c];
    }
  }
  for (size_t m = 0; m < streams.size(); ++m) {
    rep.stream_names.push_back(to_string(streams[m]));
    rep.stream_acc.push_back(double(stream_correct[m]) /
                             double(data.samples.size()));
  }
  rep.fused_acc = double(fused_correct) / double(data.samples.size());
  rep.overall_acc = rep.fused_acc;
  if (data.source == "synthetic") {
    rep.caveat =
        "synthetic dataset in use: results are desk-scale sanity numbers and "
        "are not comparable to published NTU / NW-UCLA / UAV-Human "
        "benchmark accuracies";
  }
  return rep;
}

std::string report_to_text(const EvalReport& r) {
  std::string out;
  char buf[160];
  for (size_t m = 0; m < r.stream_names.size(); ++m) {
    std::snprintf(buf, sizeof(buf), "stream %-12s top-1 %.4f\n",
                  r.stream_names[m].c_str(), r.stream_acc[m]);
    out += buf;
  }
  std::snprintf(buf, sizeof(buf), "fused               top-1 %.4f\n",
                r.fused_acc);
  out += buf;
  out += "per-class accuracy:\n";
  for (size_t c = 0; c < r.per_class_acc.size(); ++c) {
    std::snprintf(buf, sizeof(buf), "  class %zu: %.4f (%d samples)\n", c,
                  r.per_class_acc[c], r.per_class_count[c]);
    out += buf;
  }
  if (!r.caveat.empty()) out += "note: " + r.caveat + "\n";
  return out;
}

std::string report_to_json(const EvalReport& r) {
  json j;
  j["streams"] = r.stream_names;
  j["stream_acc"] = r.stream_acc;
  j["fused_acc"] = r.fused_acc;
  j["confusion"] = r.confusion;
  j["per_class_acc"] = r.per_class_acc;
  j["per_class_count"] = r.per_class_count;
  if (!r.caveat.empty()) j["caveat"] = r.caveat;
  return j.dump(2);
}

}  // namespace skelmamba
