#pragma once

#include <optional>
#include <string>
#include <vector>

#include "skelmamba/model.hpp"

namespace skelmamba {

struct TrainConfig {
  double lr = 0.025;
  double momentum = 0.9;
  double weight_decay = 0.0004;
  std::vector<int> lr_milestones{110, 120};  // x0.1 at each
  double lr_gamma = 0.1;
  int batch = 64;
  int epochs = 30;
  uint64_t seed = 1;
  std::string precision = "f32";
  double clip_grad_norm = 0.0;   // 0 disables clipping
  int kd_warmup_epochs = 0;      // ramp the distillation term in linearly
};

double lr_at_epoch(const TrainConfig& cfg, int epoch);  // epoch is 0-based

// SGD with momentum; weight decay skips parameters flagged decay=false.
class Sgd {
 public:
  explicit Sgd(std::vector<Model::Param> params, double momentum,
               double weight_decay);
  void step(double lr);
  void zero_grad();
  // scales gradients so their global L2 norm is at most max_norm;
  // returns the pre-clip norm
  double clip_gradients(double max_norm);
  const std::vector<Model::Param>& params() const { return params_; }

 private:
  std::vector<Model::Param> params_;
  std::vector<std::vector<double>> velocity_;
  double momentum_, weight_decay_;
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double eval_acc = 0.0;
  double wall_s = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> log;
  double best_eval_acc = 0.0;
  std::string best_checkpoint;  // empty if no out_dir given
  bool aborted_nan = false;
};

// Supervised training with optional teacher distillation. When `teacher`
// is given, the loss is cross_entropy + dkd against the frozen teacher's
// logits. Appends one JSON line per epoch to <out_dir>/metrics.jsonl when
// out_dir is non-empty and keeps the best checkpoint there.
TrainResult train(Model& model, const Dataset& train_data,
                  const Dataset& eval_data, const TrainConfig& cfg,
                  const std::string& out_dir = "", Model* teacher = nullptr,
                  const DkdLoss* kd = nullptr);

// Two-stage distillation: trains (or loads) the covariance-pooled
// teacher, then trains the plain-head student against it. Backbone
// configs must agree except for head_kind.
struct CpkdResult {
  TrainResult teacher;
  TrainResult student;
  uint64_t teacher_signature_before = 0;
  uint64_t teacher_signature_after = 0;
};
CpkdResult train_cpkd(Model& teacher, Model& student,
                      const Dataset& train_data, const Dataset& eval_data,
                      const TrainConfig& teacher_cfg,
                      const TrainConfig& student_cfg, const DkdLoss& kd,
                      const std::string& out_dir = "");

// Accuracy of a model on a dataset (eval mode, full sequences).
double evaluate_accuracy(Model& model, const Dataset& data);

struct EvalReport {
  std::vector<std::string> stream_names;
  std::vector<double> stream_acc;
  double fused_acc = 0.0;
  std::vector<std::vector<int>> confusion;  // [true][pred] fused
  std::vector<double> per_class_acc;
  std::vector<int> per_class_count;
  double overall_acc = 0.0;  // == fused_acc
  std::string caveat;        // set when the dataset is synthetic
};

// Multi-stream evaluation with late softmax-score fusion. One model per
// requested stream; each model sees the dataset derived into its stream.
EvalReport evaluate(std::vector<Model*> models,
                    const std::vector<StreamKind>& streams,
                    const Dataset& data);

std::string report_to_text(const EvalReport& r);
std::string report_to_json(const EvalReport& r);

// Builds the (B*, 3, T, N) person-stacked input batch plus bookkeeping to
// average per-person logits back into per-sample logits.
struct BatchInputs {
  Tensor input;              // (sum persons, 3, T, N)
  std::vector<int> labels;   // per sample
  int64_t persons = 1;       // uniform person count
};
BatchInputs make_batch(const std::vector<const SkeletonSequence*>& samples,
                       StreamKind stream, const SkeletonTopology& topology,
                       int64_t frames, ResampleMode mode, Rng* rng);

// Per-sample logits from per-person logits (mean over persons).
Tensor person_mean_logits(const Tensor& logits, int64_t persons);

}  // namespace skelmamba
