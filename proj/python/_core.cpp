#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "medvqa/contrastive.hpp"
#include "medvqa/error.hpp"
#include "medvqa/explain.hpp"
#include "medvqa/synthetic.hpp"
#include "medvqa/training.hpp"

namespace py = pybind11;
using namespace medvqa;
using json = nlohmann::json;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Image to_image(const FloatArray& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw ShapeError("image must be an H x W x 3 array");
  Image img(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), img.pixels.begin());
  img.validate();
  return img;
}

FloatArray from_image(const Image& img) {
  FloatArray out({img.height, img.width, Image::channels});
  std::copy(img.pixels.begin(), img.pixels.end(), out.mutable_data());
  return out;
}

torch::Tensor to_tensor(const DoubleArray& a) {
  std::vector<std::int64_t> shape(a.shape(), a.shape() + a.ndim());
  return torch::from_blob(const_cast<double*>(a.data()), shape, torch::kFloat64).clone();
}

VqaSample to_sample(const py::dict& d) {
  VqaSample s;
  s.question = d["question"].cast<std::string>();
  s.answer = d["answer"].cast<std::string>();
  s.category = parse_category(d["category"].cast<std::string>());
  if (d.contains("image_id")) s.image_id = d["image_id"].cast<std::string>();
  if (d.contains("image") && !d["image"].is_none()) {
    s.image = std::make_shared<const Image>(to_image(d["image"].cast<FloatArray>()));
  }
  return s;
}

std::vector<VqaSample> to_samples(const py::list& items) {
  std::vector<VqaSample> out;
  for (const auto& item : items) out.push_back(to_sample(item.cast<py::dict>()));
  return out;
}

struct PyModel {
  VqaSystem system;

  static PyModel load(const std::string& dir) { return {load_checkpoint(dir)}; }

  static PyModel fit(const py::list& items, const std::string& model_json, const std::string& train_json,
                     std::uint64_t seed) {
    auto samples = to_samples(items);
    auto cfg = ModelConfig::from_json(json::parse(model_json));
    TrainConfig tc;
    tc.merge_json(json::parse(train_json));
    py::gil_scoped_release unlock;
    PyModel m{build_system_for(cfg, samples, seed)};
    train(m.system, samples, tc);
    return m;
  }

  std::vector<std::pair<std::string, double>> predict(const FloatArray& image, const std::string& question, int k) {
    auto img = to_image(image);
    py::gil_scoped_release unlock;
    auto p = medvqa::predict(system, img, question, std::min<int>(k, static_cast<int>(system.answers.size())));
    std::vector<std::pair<std::string, double>> out;
    for (const auto& r : p.top_k) out.emplace_back(r.answer, r.probability);
    return out;
  }

  DoubleArray gradcam(const FloatArray& image, const std::string& question, std::optional<std::int64_t> target) {
    auto img = to_image(image);
    CamResult cam;
    {
      py::gil_scoped_release unlock;
      cam = medvqa::gradcam(system, img, question, target);
    }
    DoubleArray out({cam.heatmap.height, cam.heatmap.width});
    std::copy(cam.heatmap.values.begin(), cam.heatmap.values.end(), out.mutable_data());
    return out;
  }

  std::string evaluate(const py::list& items) {
    auto samples = to_samples(items);
    py::gil_scoped_release unlock;
    return medvqa::evaluate(system, samples).to_json().dump();
  }
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "medical VQA core";

  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<RangeError>(m, "RangeError", PyExc_IndexError);
  py::register_exception<LoadError>(m, "LoadError", PyExc_OSError);

  m.def("normalize_answer", [](const std::string& s) { return normalize_answer(s); });
  m.def("tokenize", [](const std::string& s) { return tokenize(s); });
  m.def("format_mean_std", &format_mean_std, py::arg("mean"), py::arg("std"), py::arg("decimals") = 2);

  m.def("nt_xent_loss", [](const DoubleArray& z, double tau) { return nt_xent_loss(to_tensor(z), tau).item<double>(); },
        py::arg("z"), py::arg("temperature"));

  m.def(
      "gradcam_from_activations",
      [](const DoubleArray& a, const DoubleArray& g, int h, int w) {
        auto r = gradcam_from_activations(to_tensor(a), to_tensor(g), h, w);
        DoubleArray out({h, w});
        std::copy(r.heatmap.values.begin(), r.heatmap.values.end(), out.mutable_data());
        return out;
      },
      py::arg("activations"), py::arg("gradients"), py::arg("height"), py::arg("width"));

  m.def(
      "synthetic_dataset",
      [](int n, std::uint64_t seed, int image_size, int questions_per_image) {
        auto ds = make_synthetic_dataset(n, seed, SyntheticOptions{image_size, questions_per_image});
        py::list out;
        for (const auto& s : ds.samples) {
          py::dict d;
          d["image_id"] = s.image_id;
          d["image"] = from_image(*s.image);
          d["question"] = s.question;
          d["answer"] = s.answer;
          d["category"] = std::string(category_name(s.category));
          out.append(d);
        }
        return out;
      },
      py::arg("n"), py::arg("seed"), py::arg("image_size") = 64, py::arg("questions_per_image") = 2);

  m.def(
      "evaluate_predictions",
      [](const py::list& items, const std::vector<std::string>& predictions) {
        auto samples = to_samples(items);
        return evaluate_predictions(samples, predictions).to_json().dump();
      },
      py::arg("samples"), py::arg("predictions"));

  py::class_<PyModel>(m, "Model")
      .def_static("load", &PyModel::load, py::arg("checkpoint_dir"))
      .def_static("fit", &PyModel::fit, py::arg("samples"), py::arg("model_config"), py::arg("train_config"),
                  py::arg("seed") = 0)
      .def("save", [](const PyModel& self, const std::string& dir) { save_checkpoint(self.system, dir); })
      .def("predict", &PyModel::predict, py::arg("image"), py::arg("question"), py::arg("k") = 5)
      .def("gradcam", &PyModel::gradcam, py::arg("image"), py::arg("question"), py::arg("target") = py::none())
      .def("evaluate", &PyModel::evaluate, py::arg("samples"))
      .def_property_readonly("variant", [](const PyModel& self) { return variant_name(self.system.config); })
      .def_property_readonly("answers", [](const PyModel& self) { return self.system.answers.answers(); })
      .def_property_readonly("config", [](const PyModel& self) { return self.system.config.to_json().dump(); });
}
