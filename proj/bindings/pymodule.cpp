#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "kshield/attacks.hpp"
#include "kshield/defense.hpp"
#include "kshield/harness.hpp"
#include "kshield/kernels.hpp"

namespace py = pybind11;
using namespace kshield;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style |
                                                       py::array::forcecast>& a) {
  Shape shape;
  for (py::ssize_t i = 0; i < a.ndim(); ++i) {
    shape.push_back(static_cast<int>(a.shape(i)));
  }
  std::vector<double> data(a.data(), a.data() + a.size());
  return Tensor::from(std::move(shape), std::move(data));
}

py::array_t<double> array_from_tensor(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
  py::array_t<double> out(shape);
  std::copy(t.data.begin(), t.data.end(), out.mutable_data());
  return out;
}

Dataset dataset_from_arrays(const py::array_t<double>& images,
                            const std::vector<int>& labels, int num_classes) {
  py::array_t<double, py::array::c_style | py::array::forcecast> a(images);
  if (a.ndim() != 4) throw ShapeError("images must be [N,C,H,W]");
  Dataset ds;
  ds.name = "python";
  ds.num_classes = num_classes;
  const py::ssize_t n = a.shape(0);
  const int64_t stride = a.size() / n;
  for (py::ssize_t i = 0; i < n; ++i) {
    Shape s = {static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2)),
               static_cast<int>(a.shape(3))};
    std::vector<double> data(a.data() + i * stride, a.data() + (i + 1) * stride);
    ds.images.push_back(Tensor::from(s, std::move(data)));
  }
  ds.labels = labels;
  ds.check_invariants();
  return ds;
}

AttackConfig attack_config_from_kwargs(const std::string& kind, double epsilon,
                                       double alpha, int iterations,
                                       double confidence, uint64_t seed) {
  AttackConfig cfg;
  cfg.kind = attack_kind_from_string(kind);
  cfg.epsilon = epsilon;
  cfg.alpha = alpha;
  cfg.iterations = iterations;
  cfg.deepfool_max_iterations = iterations;
  cfg.cw.iterations = std::max(iterations, 10);
  cfg.cw.confidence = confidence;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

PYBIND11_MODULE(kshield, m) {
  m.doc() = "polynomial-kernel transform defense sandbox";

  py::register_exception<ConfigError>(m, "ConfigError");
  py::register_exception<DataError>(m, "DataError");
  py::register_exception<ShapeError>(m, "ShapeError");

  m.def(
      "median_filter",
      [](const py::array_t<double>& img, int window) {
        return array_from_tensor(median_filter(tensor_from_array(img), window));
      },
      py::arg("image"), py::arg("window") = 2);

  m.def(
      "l1_ball_projection",
      [](const std::vector<double>& v, double radius) {
        return l1_ball_projection(v, radius);
      },
      py::arg("v"), py::arg("radius"));

  m.def(
      "kernel_fn",
      [](const py::array_t<double>& u, const py::array_t<double>& v, double e,
         int d) {
        return kernel_fn(tensor_from_array(u), tensor_from_array(v),
                         KernelParams{e, d});
      },
      py::arg("u"), py::arg("v"), py::arg("e") = 0.0, py::arg("d") = 1);

  m.def(
      "kernel_matrix",
      [](const py::array_t<double>& features, double e, int d) {
        return array_from_tensor(
            kernel_matrix(tensor_from_array(features), KernelParams{e, d}));
      },
      py::arg("features"), py::arg("e") = 0.0, py::arg("d") = 1);

  m.def(
      "explicit_phi",
      [](const std::vector<double>& v, double e, int d) {
        return explicit_phi(v, KernelParams{e, d});
      },
      py::arg("v"), py::arg("e") = 0.0, py::arg("d") = 1);

  m.def(
      "vote",
      [](int original, const std::vector<int>& copies, int c3) {
        return vote(original, copies, c3);
      },
      py::arg("original"), py::arg("copy_predictions"), py::arg("c3"));

  py::class_<ModelSpec>(m, "ModelSpec")
      .def(py::init([](int channels, int height, int width, int conv_width,
                       int conv_width_deep, int classes) {
             ModelSpec s;
             s.in_channels = channels;
             s.in_h = height;
             s.in_w = width;
             s.width = conv_width;
             s.width_deep = conv_width_deep;
             s.num_classes = classes;
             s.validate();
             return s;
           }),
           py::arg("channels") = 3, py::arg("height") = 8, py::arg("width") = 8,
           py::arg("conv_width") = 8, py::arg("conv_width_deep") = 0,
           py::arg("classes") = 4)
      .def_readonly("num_classes", &ModelSpec::num_classes)
      .def("param_count", &ModelSpec::param_count)
      .def("hash", &ModelSpec::hash);

  py::class_<Model>(m, "Model")
      .def(py::init<ModelSpec, uint64_t>(), py::arg("spec"), py::arg("seed"))
      .def("predict_label",
           [](const Model& self, const py::array_t<double>& img) {
             return self.predict_label(tensor_from_array(img));
           })
      .def("predict_probs",
           [](const Model& self, const py::array_t<double>& img) {
             return array_from_tensor(self.predict(tensor_from_array(img)).probs);
           })
      .def("tap_features",
           [](const Model& self, const py::array_t<double>& img, int tap) {
             std::vector<Tensor> taps;
             self.forward_with_taps(tensor_from_array(img), taps);
             return array_from_tensor(taps.at(static_cast<size_t>(tap)));
           })
      .def("save",
           [](const Model& self, const std::string& path) {
             save_checkpoint(path, snapshot(self, 0, TrainKind::Std, 0));
           })
      .def_static("load", [](const std::string& path, const ModelSpec& spec) {
        return load_model(path, spec);
      });

  m.def(
      "make_synthetic",
      [](const std::string& kind, int n, int classes, double noise, uint64_t seed,
         int channels, int height, int width) {
        SyntheticKind k =
            kind == "rings" ? SyntheticKind::Rings : SyntheticKind::Blobs;
        Dataset ds = make_synthetic(k, n, classes, noise, seed, channels, height,
                                    width);
        py::list images;
        for (const Tensor& t : ds.images) images.append(array_from_tensor(t));
        return py::make_tuple(images, ds.labels);
      },
      py::arg("kind") = "blobs", py::arg("n") = 100, py::arg("classes") = 4,
      py::arg("noise") = 0.08, py::arg("seed") = 0, py::arg("channels") = 3,
      py::arg("height") = 8, py::arg("width") = 8);

  m.def(
      "train_standard",
      [](Model& model, const py::array_t<double>& images,
         const std::vector<int>& labels, int epochs, int batch_size, double lr,
         uint64_t seed) {
        Dataset ds = dataset_from_arrays(images, labels, model.num_classes());
        TrainConfig cfg;
        cfg.epochs = epochs;
        cfg.batch_size = batch_size;
        cfg.lr = lr;
        cfg.seed = seed;
        cfg.accuracy_margin = -1.0;
        TrainReport report;
        train_standard(model, ds, cfg, &report);
        return py::make_tuple(report.train_accuracy, report.final_loss);
      },
      py::arg("model"), py::arg("images"), py::arg("labels"),
      py::arg("epochs") = 10, py::arg("batch_size") = 16, py::arg("lr") = 0.02,
      py::arg("seed") = 1);

  m.def(
      "attack",
      [](const Model& model, const py::array_t<double>& image, int label,
         const std::string& kind, double epsilon, double alpha, int iterations,
         double confidence, uint64_t seed) {
        AttackConfig cfg = attack_config_from_kwargs(kind, epsilon, alpha,
                                                     iterations, confidence, seed);
        Tensor img = tensor_from_array(image);
        AttackOutcome o;
        switch (cfg.kind) {
          case AttackKind::FGSM:
            o = fgsm(model, img, label, cfg.alpha > 0 ? cfg.alpha : cfg.epsilon);
            break;
          case AttackKind::BIM:
            o = bim(model, img, label, cfg);
            break;
          case AttackKind::PGD:
            o = pgd(model, img, label, cfg);
            break;
          case AttackKind::DeepFool:
            o = deepfool(model, img, cfg, label);
            break;
          case AttackKind::CW_L2:
            o = cw_l2(model, img, label, cfg);
            break;
          default:
            throw ConfigError("attack(): bpda needs a DefensePipeline");
        }
        py::dict out;
        out["adversarial"] = array_from_tensor(o.adversarial);
        out["success"] = o.success;
        out["l2"] = o.l2;
        out["linf"] = o.linf;
        out["iterations_used"] = o.iterations_used;
        return out;
      },
      py::arg("model"), py::arg("image"), py::arg("label"), py::arg("kind"),
      py::arg("epsilon") = 0.05, py::arg("alpha") = 0.01,
      py::arg("iterations") = 10, py::arg("confidence") = 0.0,
      py::arg("seed") = 0);

  py::class_<DefenseConfig>(m, "DefenseConfig")
      .def(py::init([](double c1, double c2, int c3, int iterations,
                       const std::vector<int>& layers, double kernel_e,
                       int kernel_d, int window, uint64_t sample_seed) {
             DefenseConfig cfg;
             cfg.c1 = c1;
             cfg.c2 = c2;
             cfg.c3 = c3;
             cfg.transform_iterations = iterations;
             cfg.tap_layers = layers;
             cfg.kernel = KernelParams{kernel_e, kernel_d};
             cfg.smoother_window = window;
             cfg.sample_seed = sample_seed;
             return cfg;
           }),
           py::arg("c1") = 30.0, py::arg("c2") = 0.02, py::arg("c3") = 3,
           py::arg("iterations") = 10,
           py::arg("layers") = std::vector<int>{1, 2, 3, 4, 5},
           py::arg("kernel_e") = 0.0, py::arg("kernel_d") = 1,
           py::arg("window") = 2, py::arg("sample_seed") = 0);

  py::class_<DefensePipeline>(m, "DefensePipeline")
      .def(py::init([](const Model& model, const DefenseConfig& cfg,
                       const py::array_t<double>& train_images,
                       const std::vector<int>& train_labels) {
             Dataset train = dataset_from_arrays(train_images, train_labels,
                                                 model.num_classes());
             return new DefensePipeline(model, cfg, train);
           }),
           py::arg("model"), py::arg("config"), py::arg("train_images"),
           py::arg("train_labels"), py::keep_alive<1, 2>())
      .def(
          "classify",
          [](const DefensePipeline& self, const py::array_t<double>& img,
             uint64_t stream_id) {
            CommitteeResult r = self.classify(tensor_from_array(img), stream_id);
            py::dict out;
            out["original"] = r.original;
            out["final_label"] = r.final_label;
            out["overruled"] = r.overruled;
            out["copy_predictions"] = r.copy_predictions;
            out["changed"] = r.changed;
            return out;
          },
          py::arg("image"), py::arg("stream_id") = 0)
      .def("invocations", &DefensePipeline::invocations);
}
