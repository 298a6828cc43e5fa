#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "atd/categorize.hpp"
#include "atd/cli.hpp"
#include "atd/dictionary.hpp"
#include "atd/image.hpp"
#include "atd/model.hpp"
#include "atd/sparse.hpp"
#include "atd/tensor.hpp"

namespace py = pybind11;
using namespace atd;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const FloatArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor::from(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

FloatArray to_array(const Tensor& t) {
  FloatArray out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

Image to_image(const FloatArray& a) {
  if (a.ndim() != 3 && a.ndim() != 2) throw py::value_error("image must be H x W or H x W x C");
  Image img;
  img.height = a.shape(0);
  img.width = a.shape(1);
  img.channels = a.ndim() == 3 ? a.shape(2) : 1;
  img.data.assign(a.data(), a.data() + a.size());
  return img;
}

ChannelMode channel_mode(const std::string& s) {
  if (s == "y") return ChannelMode::kY;
  if (s == "rgb") return ChannelMode::kRgb;
  throw py::value_error("channel must be 'y' or 'rgb'");
}

nlohmann::json to_json(const py::dict& d) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(d).cast<std::string>());
}

py::dict to_dict(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

ModelConfig config_from(const py::object& cfg) {
  if (cfg.is_none()) return ModelConfig::preset_config("micro");
  if (py::isinstance<py::str>(cfg)) return ModelConfig::preset_config(cfg.cast<std::string>());
  auto c = ModelConfig::from_json(to_json(cfg.cast<py::dict>()));
  c.validate();
  return c;
}

}  // namespace

PYBIND11_MODULE(_atd, m) {
  m.doc() = "Adaptive token dictionary super-resolution core";

  py::register_exception<Error>(m, "AtdError", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);

  py::class_<AtdModel>(m, "Model")
      .def(py::init([](const py::object& config, std::uint64_t seed) { return AtdModel::create(config_from(config), seed); }),
           py::arg("config") = py::none(), py::arg("seed") = 0,
           "Fresh model from a preset name or a config dict.")
      .def_static("load", &load_checkpoint, py::arg("path"))
      .def("save", [](const AtdModel& self, const std::string& path) { save_checkpoint(path, self); }, py::arg("path"))
      .def_property_readonly("config", [](const AtdModel& self) { return to_dict(self.config.to_json()); })
      .def_property_readonly("scale", [](const AtdModel& self) { return self.config.scale; })
      .def("count_params", &AtdModel::count_params)
      .def(
          "forward",
          [](const AtdModel& self, const FloatArray& img) {
            auto x = to_tensor(img);
            Tensor y;
            {
              py::gil_scoped_release release;
              NoGradGuard guard;
              y = forward_sr(x, self);
            }
            return to_array(y);
          },
          py::arg("image"), "H x W x 3 float image in [0, 1] -> upscaled image.")
      .def(
          "max_weights",
          [](const AtdModel& self, const FloatArray& img) {
            ForwardTrace trace;
            {
              NoGradGuard guard;
              forward_sr(to_tensor(img), self, &trace);
            }
            std::vector<std::vector<float>> out;
            for (const auto& l : trace.layers) out.push_back(l.max_weight);
            return out;
          },
          py::arg("image"), "Per-layer max dictionary attention weight of every token.");

  m.def(
      "categorize",
      [](const FloatArray& x, std::vector<int> idx, std::size_t group_size) {
        auto [sorted, a] = categorize(to_tensor(x), std::move(idx), group_size);
        std::vector<std::pair<std::size_t, std::size_t>> bounds;
        for (const auto& g : a.group_bounds) bounds.emplace_back(g.begin, g.end);
        return py::make_tuple(to_array(sorted), a.perm, a.inv_perm, bounds);
      },
      py::arg("tokens"), py::arg("categories"), py::arg("group_size"),
      "Returns (sorted tokens, perm, inverse perm, group bounds).");
  m.def(
      "uncategorize",
      [](const FloatArray& y, std::vector<int> idx, std::size_t group_size) {
        return to_array(uncategorize(to_tensor(y), make_assignment(std::move(idx), group_size)));
      },
      py::arg("sorted_tokens"), py::arg("categories"), py::arg("group_size"));
  m.def(
      "effective_scale",
      [](float tau, std::size_t entries) {
        Rng rng(0);
        auto dict = TokenDictionary::create(entries, 4, 2, rng);
        Tensor(dict.tau).mutable_data()[0] = tau;
        return effective_scale(dict).item();
      },
      py::arg("tau"), py::arg("entries"));

  m.def(
      "psnr", [](const FloatArray& a, const FloatArray& b, const std::string& ch) { return psnr(to_image(a), to_image(b), channel_mode(ch)); },
      py::arg("a"), py::arg("b"), py::arg("channel") = "y");
  m.def(
      "ssim", [](const FloatArray& a, const FloatArray& b, const std::string& ch) { return ssim(to_image(a), to_image(b), channel_mode(ch)); },
      py::arg("a"), py::arg("b"), py::arg("channel") = "y");
  m.def(
      "bicubic_resize",
      [](const FloatArray& a, std::size_t h, std::size_t w) {
        auto img = bicubic_resize(to_image(a), h, w);
        FloatArray out(a.ndim() == 3 ? std::vector<py::ssize_t>{py::ssize_t(h), py::ssize_t(w), py::ssize_t(img.channels)}
                                     : std::vector<py::ssize_t>{py::ssize_t(h), py::ssize_t(w)});
        std::copy(img.data.begin(), img.data.end(), out.mutable_data());
        return out;
      },
      py::arg("image"), py::arg("height"), py::arg("width"));

  m.def(
      "lasso",
      [](const DoubleArray& dict, const DoubleArray& signal, double lambda, std::size_t iters) {
        if (dict.ndim() != 2) throw py::value_error("dictionary must be dim x atoms");
        const std::size_t dim = dict.shape(0), atoms = dict.shape(1);
        std::vector<double> low(dict.data(), dict.data() + dict.size());
        auto p = SparseCodingProblem::create(low, low, dim, atoms,
                                             std::vector<double>(signal.data(), signal.data() + signal.size()), lambda);
        std::vector<double> history;
        auto alpha = lasso_solve(p, iters, 0.0, &history);
        return py::make_tuple(alpha, history);
      },
      py::arg("dictionary"), py::arg("signal"), py::arg("lam"), py::arg("iters") = 500,
      "ISTA on |D a - y|^2 + lam |a|_1 after unit-normalizing the columns; returns (alpha, objective history).");
  m.def("soft_threshold", py::overload_cast<double, double>(&soft_threshold), py::arg("v"), py::arg("t"));

  m.def(
      "run_cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "atd");
        std::vector<const char*> argv;
        for (const auto& a : args) argv.push_back(a.c_str());
        std::ostringstream out, err;
        const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the command line tool in-process; returns (exit code, stdout, stderr).");
}
