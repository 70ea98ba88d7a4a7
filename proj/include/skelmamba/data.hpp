#pragma once

#include <string>
#include <vector>

#include "skelmamba/tensor.hpp"
#include "skelmamba/topology.hpp"

namespace skelmamba {

// One action sample: (T_raw, n_persons, n_joints, 3) coordinates plus
// label and capture metadata.
struct SkeletonSequence {
  int64_t t_raw = 0;
  int64_t n_persons = 1;
  int64_t n_joints = 0;
  std::vector<double> coords;  // row-major (t, p, j, xyz)
  int label = -1;
  int subject = 0;
  int camera = 0;
  int setup = 0;

  double& at(int64_t t, int64_t p, int64_t j, int64_t c);
  double at(int64_t t, int64_t p, int64_t j, int64_t c) const;
  void validate() const;  // finite coords, t_raw >= 1, n_persons in {1,2}
};

enum class StreamKind { joint, bone, joint_motion, bone_motion };
StreamKind stream_from_string(const std::string& s);
std::string to_string(StreamKind k);

enum class ResampleMode { train_random_crop, eval_full };

// NTU .skeleton text layout: frame count; per frame a body count; per
// body a header line, an optional joint-count line, then joint lines
// whose first three fields are x y z. Bodies beyond two are dropped by
// total-motion-energy ranking. Parse errors carry the line number.
SkeletonSequence parse_ntu_skeleton(const std::string& text);
SkeletonSequence parse_ntu_skeleton_file(const std::string& path);

// Linear time resampling. Training mode crops a random window (length
// ratio uniform in [0.5, 1]) first; eval keeps the full sequence.
// Endpoints map exactly.
SkeletonSequence resample_frames(const SkeletonSequence& seq, int64_t t_out,
                                 ResampleMode mode, Rng* rng = nullptr);

// bone[t,n] = joint[t,n] - joint[t,parent(n)]; motion[t] = x[t+1] - x[t]
// with the final frame zero; bone_motion = motion of bone.
SkeletonSequence derive_stream(const SkeletonSequence& joint_seq,
                               StreamKind kind,
                               const SkeletonTopology& topology);

// Subtracts the first frame's center-joint position (per person).
SkeletonSequence center_sequence(const SkeletonSequence& seq,
                                 int center_joint);

// (n_persons, 3, T, n_joints) model input layout.
Tensor to_model_input(const SkeletonSequence& seq);

struct Dataset {
  std::vector<SkeletonSequence> samples;
  std::string source;  // "synthetic" or a dataset/manifest name
  int n_classes = 0;
};

// Deterministic parametric motions, one template per class, with phase /
// frequency jitter per sample and additive Gaussian noise (sigma 0.02).
// Classes share their time-averaged pose, so a frame-mean centroid
// classifier stays near chance; generation verifies that it scores below
// 60% and throws otherwise.
Dataset synth_dataset(int n_classes, int n_per_class, int64_t t_raw,
                      const SkeletonTopology& topology, uint64_t seed,
                      double noise_sigma = 0.02);

// Accuracy of the weak baseline: nearest class centroid on frame-mean
// coordinates (person 0).
double frame_mean_centroid_accuracy(const Dataset& train,
                                    const Dataset& eval);

// Deterministic shuffle + split; same seed, same partition.
std::pair<Dataset, Dataset> split_dataset(const Dataset& all,
                                          double eval_fraction, uint64_t seed);
uint64_t dataset_signature(const Dataset& d);  // order-sensitive hash

// Sum of per-stream softmax probabilities; argmax is the prediction.
Tensor fuse_scores(const std::vector<Tensor>& per_stream_logits);

// JSON manifest: array of {path, label, subject, camera, setup}. Entries
// may point at .skeleton text files or .tdmt cached tensors.
struct ManifestEntry {
  std::string path;
  int label = 0;
  int subject = 0;
  int camera = 0;
  int setup = 0;
};
std::vector<ManifestEntry> read_manifest(const std::string& path);
void write_manifest(const std::vector<ManifestEntry>& entries,
                    const std::string& path);
Dataset load_manifest_dataset(const std::string& manifest_path,
                              int64_t n_joints_hint);

}  // namespace skelmamba
