#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "dapnet/cli.hpp"
#include "dapnet/config.hpp"
#include "dapnet/errors.hpp"
#include "dapnet/evaluation.hpp"
#include "dapnet/losses.hpp"
#include "dapnet/networks.hpp"
#include "dapnet/synthetic.hpp"
#include "dapnet/training.hpp"

namespace py = pybind11;
using namespace dapnet;

namespace {

template <typename T>
using Array = py::array_t<T, py::array::c_style | py::array::forcecast>;

torch::Tensor to_tensor(const Array<float>& a) {
  std::vector<std::int64_t> shape(a.shape(), a.shape() + a.ndim());
  return torch::from_blob(const_cast<float*>(a.data()), shape, torch::kFloat32).clone();
}

torch::Tensor to_mask(const Array<std::int64_t>& a) {
  std::vector<std::int64_t> shape(a.shape(), a.shape() + a.ndim());
  return torch::from_blob(const_cast<std::int64_t*>(a.data()), shape, torch::kInt64).clone();
}

py::array_t<float> to_numpy(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat32).contiguous();
  std::vector<py::ssize_t> shape(c.sizes().begin(), c.sizes().end());
  py::array_t<float> out(shape);
  std::memcpy(out.mutable_data(), c.data_ptr<float>(), c.numel() * sizeof(float));
  return out;
}

py::array_t<std::uint8_t> image_to_numpy(const Image8& img) {
  std::vector<py::ssize_t> shape{img.height, img.width};
  if (img.channels > 1) shape.push_back(img.channels);
  py::array_t<std::uint8_t> out(shape);
  std::memcpy(out.mutable_data(), img.data.data(), img.data.size());
  return out;
}

Image8 image_from_numpy(const Array<std::uint8_t>& a) {
  if (a.ndim() != 2 && a.ndim() != 3) throw ShapeError("expected H×W or H×W×C uint8 array");
  Image8 img(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)),
             a.ndim() == 3 ? static_cast<int>(a.shape(2)) : 1);
  std::memcpy(img.data.data(), a.data(), img.data.size());
  return img;
}

std::vector<Override> overrides_from(const std::map<std::string, std::string>& m) {
  return {m.begin(), m.end()};
}

py::dict to_dict(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

// Generator plus its config, for inference from Python.
struct Model {
  ExperimentConfig cfg;
  SegmentationNet net{nullptr};

  py::array_t<float> predict(const Array<std::uint8_t>& rgb) {
    const auto image = normalize_image(image_from_numpy(rgb));
    torch::NoGradGuard guard;
    return to_numpy(sliding_window_infer(net, image, cfg.crop_size, cfg.effective_eval_stride()));
  }

  py::dict forward_shapes(int batch, int size) {
    torch::NoGradGuard guard;
    auto out = forward_segmentation(net, torch::zeros({batch, 3, size, size}), Mode::Eval);
    py::dict d;
    d["ppm_feature"] = py::tuple(py::cast(out.ppm_feature.sizes().vec()));
    d["fused_feature"] = py::tuple(py::cast(out.fused_feature.sizes().vec()));
    d["logits"] = py::tuple(py::cast(out.logits.sizes().vec()));
    return d;
  }
};

}  // namespace

PYBIND11_MODULE(_dapnet, m) {
  m.doc() = "Domain-adaptive gland segmentation: C++ core bindings";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_IOError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_IOError);

  py::class_<ExperimentConfig>(m, "ExperimentConfig")
      .def(py::init([](const std::map<std::string, std::string>& overrides) {
             return parse_config("", overrides_from(overrides));
           }),
           py::arg("overrides") = std::map<std::string, std::string>{})
      .def_static(
          "parse",
          [](const std::string& text, const std::map<std::string, std::string>& overrides) {
            return parse_config(text, overrides_from(overrides));
          },
          py::arg("text"), py::arg("overrides") = std::map<std::string, std::string>{})
      .def_static(
          "load",
          [](const std::filesystem::path& p, const std::map<std::string, std::string>& overrides) {
            return load_config(p, overrides_from(overrides));
          },
          py::arg("path"), py::arg("overrides") = std::map<std::string, std::string>{})
      .def("serialize", &serialize_config)
      .def("hash", &config_hash)
      .def("lr_at_epoch", &lr_at_epoch)
      .def_property_readonly("variant", [](const ExperimentConfig& c) { return std::string(to_string(c.variant)); })
      .def_readonly("alpha", &ExperimentConfig::alpha)
      .def_readonly("lambda_img", &ExperimentConfig::lambda_img)
      .def_readonly("lambda_feat", &ExperimentConfig::lambda_feat)
      .def_readonly("base_lr", &ExperimentConfig::base_lr)
      .def_readonly("total_epochs", &ExperimentConfig::total_epochs)
      .def_readonly("constant_epochs", &ExperimentConfig::constant_epochs)
      .def_readonly("batch_size", &ExperimentConfig::batch_size)
      .def_readonly("crop_size", &ExperimentConfig::crop_size)
      .def_readonly("seed", &ExperimentConfig::seed)
      .def("__eq__", [](const ExperimentConfig& a, const ExperimentConfig& b) { return a == b; })
      .def("__repr__", [](const ExperimentConfig& c) { return "ExperimentConfig(hash=" + std::to_string(config_hash(c)) + ")"; });

  m.def(
      "render_synthetic",
      [](std::uint64_t seed, int index, int size, const std::string& style, bool paired) {
        auto s = render_synthetic(seed, index, size, parse_stain_style(style), paired);
        return py::make_tuple(image_to_numpy(s.image), image_to_numpy(s.mask));
      },
      py::arg("seed"), py::arg("index"), py::arg("size") = 128, py::arg("style") = "stainA",
      py::arg("paired") = false, "Returns (H×W×3 uint8 image, H×W uint8 mask in {0,255}).");

  m.def(
      "generate_synthetic_dataset",
      [](const std::filesystem::path& out_dir, std::uint64_t seed, int n, int n_test, int size,
         const std::string& style, bool paired) {
        SynthOptions o;
        o.seed = seed;
        o.n_images = n;
        o.n_test = n_test;
        o.size = size;
        o.style = parse_stain_style(style);
        o.paired = paired;
        return generate_synthetic_dataset(o, out_dir).summary();
      },
      py::arg("out_dir"), py::arg("seed"), py::arg("n"), py::arg("n_test") = 0, py::arg("size") = 128,
      py::arg("style") = "stainA", py::arg("paired") = false);

  m.def(
      "pixel_accuracy",
      [](const Array<std::int64_t>& pred, const Array<std::int64_t>& gt) {
        return pixel_accuracy(to_mask(pred), to_mask(gt));
      },
      py::arg("pred"), py::arg("gt"));
  m.def(
      "iou",
      [](const Array<std::int64_t>& pred, const Array<std::int64_t>& gt) {
        return intersection_over_union(to_mask(pred), to_mask(gt));
      },
      py::arg("pred"), py::arg("gt"));

  m.def(
      "paired_t_test",
      [](const std::vector<double>& a, const std::vector<double>& b) {
        const auto r = paired_t_test(a, b);
        py::dict d;
        d["t"] = r.t;
        d["p"] = r.p;
        d["df"] = r.df;
        d["degenerate"] = r.degenerate;
        return d;
      },
      py::arg("a"), py::arg("b"));

  m.def(
      "segmentation_loss",
      [](const Array<float>& probs, const Array<std::int64_t>& mask, double alpha, double smooth) {
        return segmentation_loss(to_tensor(probs), to_mask(mask), alpha, smooth).item<double>();
      },
      py::arg("probs"), py::arg("mask"), py::arg("alpha") = 1.0, py::arg("smooth") = 1.0);
  m.def(
      "lsgan_d_loss",
      [](const Array<float>& d_t, const Array<float>& d_s) {
        return lsgan_d_loss(to_tensor(d_t), to_tensor(d_s)).item<double>();
      },
      py::arg("d_target"), py::arg("d_source"));

  py::class_<Model>(m, "Model")
      .def(py::init([](const ExperimentConfig& cfg) {
             Model model{cfg, init_params(cfg.seed, cfg.channel_width_scale).generator};
             return model;
           }),
           py::arg("config"))
      .def_static(
          "from_checkpoint",
          [](const std::filesystem::path& p) {
            auto loaded = load_checkpoint(p);
            return Model{loaded.cfg, loaded.state.models.generator};
          },
          py::arg("path"))
      .def("predict", &Model::predict, py::arg("image"), "Foreground probability map for an H×W×3 uint8 image.")
      .def("forward_shapes", &Model::forward_shapes, py::arg("batch"), py::arg("size"))
      .def("param_count", [](const Model& mdl) { return count_params(*mdl.net); })
      .def("checksum", [](const Model& mdl) { return param_checksum(*mdl.net); });

  m.def(
      "train",
      [](const ExperimentConfig& cfg, const std::filesystem::path& run_dir) {
        py::gil_scoped_release release;
        TrainOptions opts;
        opts.run_dir = run_dir;
        auto result = train(cfg, opts);
        return result.final_checkpoint;
      },
      py::arg("config"), py::arg("run_dir"), "Trains and returns the final checkpoint path.");

  m.def(
      "evaluate",
      [](const std::filesystem::path& checkpoint, const std::filesystem::path& manifest,
         const std::string& domain) {
        auto loaded = load_checkpoint(checkpoint);
        const Domain d = domain == "target" ? Domain::Target : Domain::Source;
        auto report = evaluate_dataset(loaded.state.models.generator, load_manifest(manifest), d, loaded.cfg,
                                       domain + "_test");
        return to_dict(report.to_json());
      },
      py::arg("checkpoint"), py::arg("manifest"), py::arg("domain") = "source");

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out;
        std::ostringstream err;
        int code = 0;
        {
          py::gil_scoped_release release;
          code = cli::dispatch(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the command-line interface in-process; returns (exit code, stdout, stderr).");
}
