#include "skelmamba/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "skelmamba/tensor_io.hpp"

namespace skelmamba {

double& SkeletonSequence::at(int64_t t, int64_t p, int64_t j, int64_t c) {
  return coords[((t * n_persons + p) * n_joints + j) * 3 + c];
}

double SkeletonSequence::at(int64_t t, int64_t p, int64_t j, int64_t c) const {
  return coords[((t * n_persons + p) * n_joints + j) * 3 + c];
}

void SkeletonSequence::validate() const {
  if (t_raw < 1) throw DataError("sequence has no frames");
  if (n_persons != 1 && n_persons != 2) {
    throw DataError("sequence must have 1 or 2 persons");
  }
  if (coords.size() != size_t(t_raw * n_persons * n_joints * 3)) {
    throw DataError("sequence buffer size mismatch");
  }
  for (double v : coords) {
    if (!std::isfinite(v)) throw DataError("non-finite coordinate");
  }
}

StreamKind stream_from_string(const std::string& s) {
  if (s == "joint") return StreamKind::joint;
  if (s == "bone") return StreamKind::bone;
  if (s == "joint_motion") return StreamKind::joint_motion;
  if (s == "bone_motion") return StreamKind::bone_motion;
  throw ConfigError("unknown stream kind '" + s + "'");
}

std::string to_string(StreamKind k) {
  switch (k) {
    case StreamKind::joint: return "joint";
    case StreamKind::bone: return "bone";
    case StreamKind::joint_motion: return "joint_motion";
    case StreamKind::bone_motion: return "bone_motion";
  }
  return "?";
}

// ------------------------------------------------------------------- parsing

namespace {

struct LineReader {
  std::istringstream in;
  int line_no = 0;
  explicit LineReader(const std::string& text) : in(text) {}

  std::string next() {
    std::string line;
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) return line;
    }
    throw DataError("skeleton parse error: unexpected end of file at line " +
                    std::to_string(line_no));
  }

  static std::vector<std::string> tokens(const std::string& line) {
    std::vector<std::string> t;
    std::istringstream is(line);
    std::string w;
    while (is >> w) t.push_back(w);
    return t;
  }
};

long parse_count(const std::string& line, int line_no, const char* what) {
  auto toks = LineReader::tokens(line);
  if (toks.size() != 1) {
    throw DataError(std::string("skeleton parse error: expected ") + what +
                    " at line " + std::to_string(line_no));
  }
  try {
    return std::stol(toks[0]);
  } catch (...) {
    throw DataError(std::string("skeleton parse error: bad ") + what +
                    " at line " + std::to_string(line_no));
  }
}

}  // namespace

SkeletonSequence parse_ntu_skeleton(const std::string& text) {
  LineReader r(text);
  const long n_frames = parse_count(r.next(), r.line_no, "frame count");
  if (n_frames < 1) {
    throw DataError("skeleton parse error: non-positive frame count at line " +
                    std::to_string(r.line_no));
  }

  // first pass collects every body slot; top-2 by motion energy kept after
  struct Slot {
    std::vector<double> coords;  // (T, J, 3), zero when absent
    int64_t joints = 25;
  };
  std::vector<Slot> slots;
  int64_t n_joints = 25;

  std::vector<std::vector<std::vector<double>>> frames;  // [t][body][J*3]
  for (long t = 0; t < n_frames; ++t) {
    const long n_bodies = parse_count(r.next(), r.line_no, "body count");
    if (n_bodies < 0 || n_bodies > 32) {
      throw DataError("skeleton parse error: implausible body count at line " +
                      std::to_string(r.line_no));
    }
    std::vector<std::vector<double>> bodies;
    for (long b = 0; b < n_bodies; ++b) {
      r.next();  // body header (id + tracking fields), not interpreted
      // optional joint-count line: a single token
      std::string line = r.next();
      auto toks = LineReader::tokens(line);
      long joints = 25;
      if (toks.size() == 1) {
        joints = parse_count(line, r.line_no, "joint count");
        line.clear();
      }
      if (joints < 1 || joints > 200) {
        throw DataError("skeleton parse error: bad joint count at line " +
                        std::to_string(r.line_no));
      }
      n_joints = joints;
      std::vector<double> body(joints * 3);
      for (long j = 0; j < joints; ++j) {
        std::string jline = line.empty() ? r.next() : line;
        line.clear();
        auto jt = LineReader::tokens(jline);
        if (jt.size() < 3) {
          throw DataError(
              "skeleton parse error: expected joint coordinates at line " +
              std::to_string(r.line_no));
        }
        try {
          for (int c = 0; c < 3; ++c) body[j * 3 + c] = std::stod(jt[c]);
        } catch (...) {
          throw DataError("skeleton parse error: bad coordinate at line " +
                          std::to_string(r.line_no));
        }
      }
      bodies.push_back(std::move(body));
    }
    frames.push_back(std::move(bodies));
  }

  size_t max_bodies = 0;
  for (auto& f : frames) max_bodies = std::max(max_bodies, f.size());
  if (max_bodies == 0) {
    throw DataError("skeleton parse error: file contains no bodies");
  }

  slots.resize(max_bodies);
  for (auto& s : slots) {
    s.joints = n_joints;
    s.coords.assign(size_t(n_frames) * n_joints * 3, 0.0);
  }
  for (long t = 0; t < n_frames; ++t) {
    for (size_t b = 0; b < frames[t].size(); ++b) {
      std::copy(frames[t][b].begin(), frames[t][b].end(),
                slots[b].coords.begin() + size_t(t) * n_joints * 3);
    }
  }

  // rank slots by total motion energy sum_t ||x_{t+1} - x_t||
  std::vector<std::pair<double, size_t>> energy;
  for (size_t b = 0; b < slots.size(); ++b) {
    double e = 0.0;
    for (long t = 0; t + 1 < n_frames; ++t) {
      double acc = 0.0;
      for (int64_t k = 0; k < n_joints * 3; ++k) {
        const double d = slots[b].coords[(t + 1) * n_joints * 3 + k] -
                         slots[b].coords[t * n_joints * 3 + k];
        acc += d * d;
      }
      e += std::sqrt(acc);
    }
    energy.emplace_back(-e, b);  // sort ascending on negative energy
  }
  std::stable_sort(energy.begin(), energy.end());

  SkeletonSequence seq;
  seq.t_raw = n_frames;
  seq.n_joints = n_joints;
  seq.n_persons = slots.size() >= 2 ? 2 : 1;
  seq.coords.assign(size_t(n_frames) * seq.n_persons * n_joints * 3, 0.0);
  for (int64_t p = 0; p < seq.n_persons; ++p) {
    const auto& src = slots[energy[p].second].coords;
    for (long t = 0; t < n_frames; ++t) {
      for (int64_t k = 0; k < n_joints * 3; ++k) {
        seq.coords[((t * seq.n_persons + p) * n_joints) * 3 + k] =
            src[t * n_joints * 3 + k];
      }
    }
  }
  seq.validate();
  return seq;
}

SkeletonSequence parse_ntu_skeleton_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open skeleton file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_ntu_skeleton(ss.str());
}

// ---------------------------------------------------------------- resampling

SkeletonSequence resample_frames(const SkeletonSequence& seq, int64_t t_out,
                                 ResampleMode mode, Rng* rng) {
  if (t_out < 2) throw ConfigError("resample_frames: t_out must be >= 2");
  if (seq.t_raw < 1 || seq.coords.empty()) {
    throw DataError("resample_frames: empty sequence");
  }
  int64_t start = 0;
  int64_t len = seq.t_raw;
  if (mode == ResampleMode::train_random_crop) {
    if (!rng) throw ConfigError("resample_frames: training crop needs an rng");
    const double ratio = rng->uniform(0.5, 1.0);
    len = std::max<int64_t>(2, int64_t(std::round(ratio * seq.t_raw)));
    len = std::min(len, seq.t_raw);
    start = rng->randint(seq.t_raw - len + 1);
  }

  SkeletonSequence out;
  out.t_raw = t_out;
  out.n_persons = seq.n_persons;
  out.n_joints = seq.n_joints;
  out.label = seq.label;
  out.subject = seq.subject;
  out.camera = seq.camera;
  out.setup = seq.setup;
  const int64_t fsz = seq.n_persons * seq.n_joints * 3;
  out.coords.assign(size_t(t_out) * fsz, 0.0);

  if (len == 1) {
    for (int64_t t = 0; t < t_out; ++t) {
      std::copy(seq.coords.begin() + start * fsz,
                seq.coords.begin() + (start + 1) * fsz,
                out.coords.begin() + t * fsz);
    }
    return out;
  }

  // endpoints map exactly: u spans [start, start+len-1]
  for (int64_t t = 0; t < t_out; ++t) {
    const double u =
        double(start) + double(t) * double(len - 1) / double(t_out - 1);
    const int64_t i0 = std::min<int64_t>(int64_t(u), start + len - 2);
    const double w = u - double(i0);
    const double* f0 = seq.coords.data() + i0 * fsz;
    const double* f1 = seq.coords.data() + (i0 + 1) * fsz;
    double* dst = out.coords.data() + t * fsz;
    for (int64_t k = 0; k < fsz; ++k) {
      dst[k] = (1.0 - w) * f0[k] + w * f1[k];
    }
  }
  return out;
}

// ------------------------------------------------------------------- streams

SkeletonSequence derive_stream(const SkeletonSequence& joint_seq,
                               StreamKind kind,
                               const SkeletonTopology& topology) {
  if (kind == StreamKind::joint) return joint_seq;
  if (topology.n_joints != joint_seq.n_joints) {
    throw ConfigError("derive_stream: topology joint count mismatch");
  }
  SkeletonSequence out = joint_seq;
  const int64_t T = joint_seq.t_raw, P = joint_seq.n_persons,
                J = joint_seq.n_joints;

  auto bone_of = [&](const SkeletonSequence& src) {
    SkeletonSequence b = src;
    for (int64_t t = 0; t < T; ++t) {
      for (int64_t p = 0; p < P; ++p) {
        for (int64_t j = 0; j < J; ++j) {
          const int par = topology.parent[j];
          for (int c = 0; c < 3; ++c) {
            b.at(t, p, j, c) = src.at(t, p, j, c) - src.at(t, p, par, c);
          }
        }
      }
    }
    return b;
  };
  auto motion_of = [&](const SkeletonSequence& src) {
    SkeletonSequence m = src;
    for (int64_t t = 0; t < T; ++t) {
      for (int64_t p = 0; p < P; ++p) {
        for (int64_t j = 0; j < J; ++j) {
          for (int c = 0; c < 3; ++c) {
            m.at(t, p, j, c) = (t + 1 < T)
                                   ? src.at(t + 1, p, j, c) - src.at(t, p, j, c)
                                   : 0.0;  // final frame zero
          }
        }
      }
    }
    return m;
  };

  switch (kind) {
    case StreamKind::bone: out = bone_of(joint_seq); break;
    case StreamKind::joint_motion: out = motion_of(joint_seq); break;
    case StreamKind::bone_motion: out = motion_of(bone_of(joint_seq)); break;
    default: break;
  }
  return out;
}

SkeletonSequence center_sequence(const SkeletonSequence& seq,
                                 int center_joint) {
  SkeletonSequence out = seq;
  for (int64_t p = 0; p < seq.n_persons; ++p) {
    double cx = seq.at(0, p, center_joint, 0);
    double cy = seq.at(0, p, center_joint, 1);
    double cz = seq.at(0, p, center_joint, 2);
    // an absent person is all zeros; keep it that way
    bool absent = true;
    for (int64_t j = 0; j < seq.n_joints && absent; ++j) {
      for (int c = 0; c < 3; ++c) {
        if (seq.at(0, p, j, c) != 0.0) absent = false;
      }
    }
    if (absent) continue;
    for (int64_t t = 0; t < seq.t_raw; ++t) {
      for (int64_t j = 0; j < seq.n_joints; ++j) {
        out.at(t, p, j, 0) -= cx;
        out.at(t, p, j, 1) -= cy;
        out.at(t, p, j, 2) -= cz;
      }
    }
  }
  return out;
}

Tensor to_model_input(const SkeletonSequence& seq) {
  const int64_t T = seq.t_raw, P = seq.n_persons, J = seq.n_joints;
  std::vector<double> data(size_t(P) * 3 * T * J);
  for (int64_t p = 0; p < P; ++p) {
    for (int c = 0; c < 3; ++c) {
      for (int64_t t = 0; t < T; ++t) {
        for (int64_t j = 0; j < J; ++j) {
          data[((p * 3 + c) * T + t) * J + j] = seq.at(t, p, j, c);
        }
      }
    }
  }
  return Tensor::from_data({P, 3, T, J}, std::move(data));
}

// ----------------------------------------------------------------- synthetic

namespace {

// rest pose for the 11-joint toy humanoid
const double kRestPose[11][3] = {
    {0.00, 0.00, 0.0},   // pelvis
    {0.00, 0.30, 0.0},   // chest
    {0.00, 0.55, 0.0},   // head
    {-0.20, 0.25, 0.0},  // left shoulder
    {-0.35, 0.05, 0.0},  // left elbow
    {-0.45, -0.15, 0.0}, // left hand
    {0.20, 0.25, 0.0},   // right shoulder
    {0.35, 0.05, 0.0},   // right elbow
    {0.45, -0.15, 0.0},  // right hand
    {-0.12, -0.50, 0.0}, // left foot
    {0.12, -0.50, 0.0},  // right foot
};

constexpr double kTwoPi = 6.283185307179586;

}  // namespace

Dataset synth_dataset(int n_classes, int n_per_class, int64_t t_raw,
                      const SkeletonTopology& topology, uint64_t seed,
                      double noise_sigma) {
  if (n_classes < 1 || n_classes > 16) {
    throw ConfigError("synth_dataset: n_classes must be in [1,16]");
  }
  if (topology.n_joints < 11) {
    throw ConfigError("synth_dataset: topology needs at least 11 joints");
  }
  const int64_t J = topology.n_joints;
  Rng rng(seed);

  // joint groups for the motion templates
  const std::vector<int> left_arm{3, 4, 5}, right_arm{6, 7, 8};
  const std::vector<int> hands{4, 5, 7, 8}, feet{9, 10};

  Dataset ds;
  ds.source = "synthetic";
  ds.n_classes = n_classes;
  for (int cls = 0; cls < n_classes; ++cls) {
    for (int s = 0; s < n_per_class; ++s) {
      // per-sample jitter parameters
      const double phase = rng.uniform(0.0, 1.0);
      const double freq = 2.0 * (1.0 + 0.08 * (rng.uniform() - 0.5));
      const double amp = 0.30 * (1.0 + 0.1 * (rng.uniform() - 0.5));
      double drift[3] = {0.05 * rng.normal(), 0.05 * rng.normal(),
                         0.05 * rng.normal()};

      SkeletonSequence seq;
      seq.t_raw = t_raw;
      seq.n_persons = 1;
      seq.n_joints = J;
      seq.label = cls % 16;
      seq.subject = s;
      seq.coords.assign(size_t(t_raw) * J * 3, 0.0);

      for (int64_t t = 0; t < t_raw; ++t) {
        const double u = double(t) / double(t_raw);
        const double base = kTwoPi * (freq * u + phase);
        for (int64_t j = 0; j < J; ++j) {
          double x = j < 11 ? kRestPose[j][0] : 0.0;
          double y = j < 11 ? kRestPose[j][1] : 0.0;
          double z = j < 11 ? kRestPose[j][2] : 0.0;
          const bool in_hands =
              std::find(hands.begin(), hands.end(), int(j)) != hands.end();
          const bool in_feet =
              std::find(feet.begin(), feet.end(), int(j)) != feet.end();
          const bool left = std::find(left_arm.begin(), left_arm.end(),
                                      int(j)) != left_arm.end();
          const bool right = std::find(right_arm.begin(), right_arm.end(),
                                       int(j)) != right_arm.end();
          switch (cls % 6) {
            case 0:  // both arms wave in phase (vertical)
              if (in_hands) y += amp * std::sin(base);
              break;
            case 1:  // arms wave in anti-phase
              if (left) y += amp * std::sin(base);
              if (right) y -= amp * std::sin(base);
              break;
            case 2: {  // ripple: phase grows with hop distance from head
              const double ph = 0.22 * topology.hop[2][j];
              y += amp * std::sin(base + kTwoPi * ph);
              break;
            }
            case 3:  // hands at f, feet at 2f, horizontal
              if (in_hands) x += amp * std::sin(base);
              if (in_feet) x += amp * std::sin(2.0 * base);
              break;
            case 4:  // whole-body bounce, rectified and zero-meaned
              y += amp * (std::fabs(std::sin(base)) - 2.0 / M_PI);
              break;
            case 5:  // lateral twist: sides swing opposite ways
              if (left) { x += amp * std::sin(base); z += 0.5 * amp * std::cos(base); }
              if (right) { x -= amp * std::sin(base); z -= 0.5 * amp * std::cos(base); }
              break;
          }
          seq.at(t, 0, j, 0) = x + drift[0] + noise_sigma * rng.normal();
          seq.at(t, 0, j, 1) = y + drift[1] + noise_sigma * rng.normal();
          seq.at(t, 0, j, 2) = z + drift[2] + noise_sigma * rng.normal();
        }
      }
      ds.samples.push_back(std::move(seq));
    }
  }

  // generation-time check: frame means must not separate the classes
  if (n_classes >= 2 && n_per_class >= 4) {
    const double acc = frame_mean_centroid_accuracy(ds, ds);
    if (acc >= 0.60) {
      throw DataError(
          "synth_dataset: frame-mean centroid baseline scored " +
          std::to_string(acc) +
          ", classes are mean-separable (generation bug)");
    }
  }
  return ds;
}

double frame_mean_centroid_accuracy(const Dataset& train,
                                    const Dataset& eval) {
  if (train.samples.empty() || eval.samples.empty()) {
    throw DataError("centroid baseline: empty dataset");
  }
  const int64_t J = train.samples[0].n_joints;
  auto features = [J](const SkeletonSequence& s) {
    std::vector<double> f(J * 3, 0.0);
    for (int64_t t = 0; t < s.t_raw; ++t) {
      for (int64_t j = 0; j < J; ++j) {
        for (int c = 0; c < 3; ++c) f[j * 3 + c] += s.at(t, 0, j, c);
      }
    }
    for (double& v : f) v /= double(s.t_raw);
    return f;
  };

  int n_classes = 0;
  for (const auto& s : train.samples) n_classes = std::max(n_classes, s.label + 1);
  std::vector<std::vector<double>> centroid(n_classes,
                                            std::vector<double>(J * 3, 0.0));
  std::vector<int> count(n_classes, 0);
  for (const auto& s : train.samples) {
    auto f = features(s);
    for (int64_t k = 0; k < J * 3; ++k) centroid[s.label][k] += f[k];
    count[s.label]++;
  }
  for (int c = 0; c < n_classes; ++c) {
    if (count[c] == 0) continue;
    for (double& v : centroid[c]) v /= double(count[c]);
  }

  int correct = 0;
  for (const auto& s : eval.samples) {
    auto f = features(s);
    int best = -1;
    double best_d = 0.0;
    for (int c = 0; c < n_classes; ++c) {
      if (count[c] == 0) continue;
      double d = 0.0;
      for (int64_t k = 0; k < J * 3; ++k) {
        const double diff = f[k] - centroid[c][k];
        d += diff * diff;
      }
      if (best < 0 || d < best_d) {
        best = c;
        best_d = d;
      }
    }
    if (best == s.label) ++correct;
  }
  return double(correct) / double(eval.samples.size());
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& all,
                                          double eval_fraction,
                                          uint64_t seed) {
  std::vector<size_t> order(all.samples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed ^ 0x5eedULL);
  rng.shuffle(order);
  const size_t n_eval = size_t(std::llround(eval_fraction * order.size()));
  Dataset train, eval;
  train.source = eval.source = all.source;
  train.n_classes = eval.n_classes = all.n_classes;
  for (size_t i = 0; i < order.size(); ++i) {
    (i < n_eval ? eval : train).samples.push_back(all.samples[order[i]]);
  }
  return {train, eval};
}

uint64_t dataset_signature(const Dataset& d) {
  uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](uint64_t v) {
    h ^= v;
    h *= 0x100000001b3ULL;
  };
  for (const auto& s : d.samples) {
    mix(uint64_t(s.label));
    mix(uint64_t(s.t_raw));
    for (size_t i = 0; i < s.coords.size(); i += 97) {
      uint64_t bits;
      std::memcpy(&bits, &s.coords[i], 8);
      mix(bits);
    }
  }
  return h;
}

Tensor fuse_scores(const std::vector<Tensor>& per_stream_logits) {
  if (per_stream_logits.empty()) {
    throw ConfigError("fuse_scores: no streams given");
  }
  const Shape shape = per_stream_logits[0].shape();
  for (const auto& t : per_stream_logits) {
    if (t.shape() != shape) {
      throw ConfigError("fuse_scores: streams disagree on class count (" +
                        shape_str(t.shape()) + " vs " + shape_str(shape) +
                        ")");
    }
  }
  Tensor fused;
  for (const auto& t : per_stream_logits) {
    Tensor probs = softmax(t, -1);
    fused = fused.defined() ? add(fused, probs) : probs;
  }
  return fused;
}

// ------------------------------------------------------------------ manifest

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open manifest " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw DataError("manifest " + path + ": " + e.what());
  }
  if (!j.is_array()) throw DataError("manifest must be a JSON array");
  std::vector<ManifestEntry> out;
  for (const auto& item : j) {
    ManifestEntry e;
    e.path = item.at("path").get<std::string>();
    e.label = item.at("label").get<int>();
    e.subject = item.value("subject", 0);
    e.camera = item.value("camera", 0);
    e.setup = item.value("setup", 0);
    out.push_back(std::move(e));
  }
  return out;
}

void write_manifest(const std::vector<ManifestEntry>& entries,
                    const std::string& path) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& e : entries) {
    j.push_back({{"path", e.path},
                 {"label", e.label},
                 {"subject", e.subject},
                 {"camera", e.camera},
                 {"setup", e.setup}});
  }
  std::ofstream f(path);
  if (!f) throw DataError("cannot write manifest " + path);
  f << j.dump(2) << "\n";
}

Dataset load_manifest_dataset(const std::string& manifest_path,
                              int64_t n_joints_hint) {
  auto entries = read_manifest(manifest_path);
  Dataset ds;
  ds.source = manifest_path;
  std::string dir;
  auto slash = manifest_path.find_last_of('/');
  if (slash != std::string::npos) dir = manifest_path.substr(0, slash + 1);
  for (const auto& e : entries) {
    const std::string full =
        (!e.path.empty() && e.path[0] == '/') ? e.path : dir + e.path;
    SkeletonSequence seq;
    if (full.size() > 5 && full.substr(full.size() - 5) == ".tdmt") {
      // cached samples are stored (T, P, J, 3)
      Tensor t = read_tdmt(full);
      if (t.rank() != 4 || t.dim(3) != 3) {
        throw DataError("cached sample " + full + " has shape " +
                        shape_str(t.shape()) + ", expected (T,P,J,3)");
      }
      if (n_joints_hint > 0 && t.dim(2) != n_joints_hint) {
        throw DataError("cached sample " + full + " has " +
                        std::to_string(t.dim(2)) + " joints, expected " +
                        std::to_string(n_joints_hint));
      }
      seq.t_raw = t.dim(0);
      seq.n_persons = t.dim(1);
      seq.n_joints = t.dim(2);
      seq.coords = t.values();
    } else {
      seq = parse_ntu_skeleton_file(full);
    }
    seq.label = e.label;
    seq.subject = e.subject;
    seq.camera = e.camera;
    seq.setup = e.setup;
    ds.n_classes = std::max(ds.n_classes, e.label + 1);
    ds.samples.push_back(std::move(seq));
  }
  return ds;
}

}  // namespace skelmamba
