// Python bindings for the core operations: tensors bridge to numpy by
// copy, models are opaque handles with forward/train entry points.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "skelmamba/bench.hpp"
#include "skelmamba/config.hpp"
#include "skelmamba/train.hpp"

namespace py = pybind11;
using namespace skelmamba;

namespace {

Tensor tensor_from_numpy(const py::array_t<double>& arr) {
  py::buffer_info info = arr.request();
  Shape shape(info.shape.begin(), info.shape.end());
  auto contiguous = py::array_t<double, py::array::c_style |
                                            py::array::forcecast>(arr);
  const double* p = contiguous.data();
  return Tensor::from_data(shape,
                           std::vector<double>(p, p + contiguous.size()));
}

py::array_t<double> numpy_from_tensor(const Tensor& t) {
  std::vector<ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data(), t.data() + t.numel(), out.mutable_data());
  return out;
}

SsmParams make_ssm_params(int64_t d_inner, int n_state, uint64_t seed) {
  Rng rng(seed);
  return SsmParams::init(d_inner, n_state, rng);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "skeleton action model core: selective scan, cycle mixing, "
            "attention with hop encoding, covariance pooling, distillation";

  py::register_exception<ConfigError>(m, "ConfigError");
  py::register_exception<DataError>(m, "DataError");
  py::register_exception<NumericError>(m, "NumericError");

  // --- ssm ---------------------------------------------------------------
  py::class_<SsmParams>(m, "SsmParams")
      .def(py::init(&make_ssm_params), py::arg("d_inner"),
           py::arg("n_state") = 16, py::arg("seed") = 1)
      .def_property_readonly("d_inner", &SsmParams::d_inner)
      .def_readonly("n_state", &SsmParams::n_state);

  m.def(
      "selective_scan",
      [](const py::array_t<double>& x, const SsmParams& p) {
        NoGradGuard ng;
        return numpy_from_tensor(selective_scan(tensor_from_numpy(x), p));
      },
      py::arg("x"), py::arg("params"),
      "Selective SSM scan over (streams, time, channels).");

  m.def(
      "scan_recurrence",
      [](const py::array_t<double>& x, const py::array_t<double>& delta,
         const py::array_t<double>& A, const py::array_t<double>& B,
         const py::array_t<double>& C) {
        NoGradGuard ng;
        return numpy_from_tensor(scan_recurrence(
            tensor_from_numpy(x), tensor_from_numpy(delta),
            tensor_from_numpy(A), tensor_from_numpy(B),
            tensor_from_numpy(C)));
      },
      py::arg("x"), py::arg("delta"), py::arg("A"), py::arg("B"),
      py::arg("C"),
      "Discretized linear recurrence with explicit selection tensors.");

  m.def(
      "causal_conv1d",
      [](const py::array_t<double>& x, const py::array_t<double>& k,
         const py::array_t<double>& b) {
        NoGradGuard ng;
        return numpy_from_tensor(causal_conv1d(tensor_from_numpy(x),
                                               tensor_from_numpy(k),
                                               tensor_from_numpy(b)));
      },
      py::arg("x"), py::arg("kernel"), py::arg("bias"));

  // --- cycle mixing --------------------------------------------------------
  m.def(
      "cycle_fc",
      [](const py::array_t<double>& h, const py::array_t<double>& w,
         const py::array_t<double>& b, int kernel_size) {
        NoGradGuard ng;
        CycleFcLayer layer;
        layer.kernel_size = kernel_size;
        layer.weight = tensor_from_numpy(w);
        layer.bias = tensor_from_numpy(b);
        return numpy_from_tensor(cycle_fc(tensor_from_numpy(h), layer));
      },
      py::arg("h"), py::arg("weight"), py::arg("bias"),
      py::arg("kernel_size") = 3,
      "Cycle layer over (batch, channels, time, joints).");

  // --- topology / attention ------------------------------------------------
  m.def("hop_distance", [](const std::vector<std::pair<int, int>>& edges,
                           int n_joints) {
    return hop_distance(edges, n_joints);
  });
  m.def("builtin_topology_edges", [](const std::string& name) {
    return builtin_topology(name).edges;
  });

  // --- covariance head ------------------------------------------------------
  m.def(
      "cov_pool",
      [](const py::array_t<double>& o) {
        NoGradGuard ng;
        return numpy_from_tensor(cov_pool(tensor_from_numpy(o)));
      },
      py::arg("o"));
  m.def(
      "newton_schulz_sqrt",
      [](const py::array_t<double>& sigma, int iterations) {
        NoGradGuard ng;
        return numpy_from_tensor(
            newton_schulz_sqrt(tensor_from_numpy(sigma), iterations));
      },
      py::arg("sigma"), py::arg("iterations") = 5);
  m.def(
      "dkd_loss",
      [](const py::array_t<double>& s, const py::array_t<double>& t,
         const std::vector<int>& labels, double alpha, double beta,
         double tau) {
        NoGradGuard ng;
        DkdLoss p;
        p.alpha = alpha;
        p.beta = beta;
        p.tau = tau;
        return dkd_loss(tensor_from_numpy(s), tensor_from_numpy(t), labels, p)
            .item();
      },
      py::arg("student_logits"), py::arg("teacher_logits"), py::arg("labels"),
      py::arg("alpha") = 1.0, py::arg("beta") = 8.0, py::arg("tau") = 4.0);

  // --- model ----------------------------------------------------------------
  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("layers", &ModelConfig::layers)
      .def_readwrite("channels", &ModelConfig::channels)
      .def_readwrite("heads", &ModelConfig::heads)
      .def_readwrite("mti_scales", &ModelConfig::mti_scales)
      .def_readwrite("pool_layers", &ModelConfig::pool_layers)
      .def_readwrite("n_classes", &ModelConfig::n_classes)
      .def_readwrite("frames", &ModelConfig::frames)
      .def_readwrite("topology", &ModelConfig::topology)
      .def_readwrite("n_state", &ModelConfig::n_state)
      .def_readwrite("conv_width", &ModelConfig::conv_width)
      .def_readwrite("expand", &ModelConfig::expand);

  m.def("full_preset", &full_preset);
  m.def("desk_preset", &desk_preset);

  py::class_<Model>(m, "Model")
      .def("param_count", &Model::param_count)
      .def(
          "forward",
          [](Model& self, const py::array_t<double>& batch) {
            NoGradGuard ng;
            self.training = false;
            return numpy_from_tensor(self.forward(tensor_from_numpy(batch)));
          },
          py::arg("batch"), "Eval-mode logits for (B, 3, T, N) input.");

  m.def(
      "build_model",
      [](const ModelConfig& cfg, uint64_t seed) {
        return build_model(cfg, builtin_topology(cfg.topology), seed);
      },
      py::arg("config"), py::arg("seed") = 1);
  m.def("param_count_formula", &model_param_count_formula);

  // --- benchmark --------------------------------------------------------------
  m.def(
      "bench_scan",
      [](const std::vector<int64_t>& lengths, int64_t d_inner, int n_state,
         int streams, int warmup, int reps, uint64_t seed) {
        auto rows =
            bench_scan(lengths, d_inner, n_state, streams, warmup, reps, seed);
        py::list out;
        for (const auto& r : rows) {
          py::dict d;
          d["T"] = r.T;
          d["mean_ms"] = r.mean_ms;
          d["p50_ms"] = r.p50_ms;
          d["p95_ms"] = r.p95_ms;
          d["ratio_vs_prev"] = r.ratio_vs_prev;
          out.append(d);
        }
        return out;
      },
      py::arg("lengths"), py::arg("d_inner") = 64, py::arg("n_state") = 16,
      py::arg("streams") = 4, py::arg("warmup") = 5, py::arg("reps") = 30,
      py::arg("seed") = 1);

  m.attr("__version__") = "0.1.0";
}
