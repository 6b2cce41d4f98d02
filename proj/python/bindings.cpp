#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "latentseg/errors.hpp"
#include "latentseg/interaction.hpp"
#include "latentseg/run_config.hpp"

namespace py = pybind11;
using namespace latentseg;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using U8 = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

void require_rank(const py::buffer_info& info, py::ssize_t rank, const char* what) {
  if (info.ndim != rank) {
    throw ShapeError(std::string(what) + ": expected a " + std::to_string(rank) + "-d array, got " +
                     std::to_string(info.ndim) + "-d");
  }
}

SliceImage to_image(const F64& a) {
  const auto info = a.request();
  require_rank(info, 2, "image");
  SliceImage img(static_cast<int>(info.shape[0]), static_cast<int>(info.shape[1]));
  const auto* p = static_cast<const double*>(info.ptr);
  std::copy(p, p + img.size(), img.pixels.begin());
  return img;
}

BinaryMask to_mask(const U8& a) {
  const auto info = a.request();
  require_rank(info, 2, "mask");
  BinaryMask m(static_cast<int>(info.shape[0]), static_cast<int>(info.shape[1]));
  const auto* p = static_cast<const std::uint8_t*>(info.ptr);
  for (std::size_t i = 0; i < m.size(); ++i) m.pixels[i] = p[i] ? 1 : 0;
  return m;
}

Tensor to_tensor(const F64& a) {
  const auto info = a.request();
  std::vector<int> shape(info.shape.begin(), info.shape.end());
  Tensor t(shape);
  const auto* p = static_cast<const double*>(info.ptr);
  std::copy(p, p + t.size(), t.data.begin());
  return t;
}

py::array_t<double> from_image(const SliceImage& img) {
  py::array_t<double> out({img.height, img.width});
  std::copy(img.pixels.begin(), img.pixels.end(), out.mutable_data());
  return out;
}

py::array_t<std::uint8_t> from_mask(const BinaryMask& m) {
  py::array_t<std::uint8_t> out({m.height, m.width});
  std::copy(m.pixels.begin(), m.pixels.end(), out.mutable_data());
  return out;
}

py::array_t<double> from_tensor(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
  py::array_t<double> out(shape);
  std::copy(t.data.begin(), t.data.end(), out.mutable_data());
  return out;
}

RunConfig config_from(const std::string& text) { return RunConfig::from_config(KeyValueConfig::parse(text)); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Few-shot segmentation by one-step latent denoising";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<EmptyMaskError>(m, "EmptyMaskError", PyExc_ValueError);
  py::register_exception<ProtocolError>(m, "ProtocolError", PyExc_RuntimeError);
  py::register_exception<TrainingError>(m, "TrainingError", PyExc_RuntimeError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  // ---- config ----
  m.def("default_config", [] { return RunConfig{}.to_text(); }, "Default run config as key = value text.");
  m.def("config_keys", [] { return RunConfig::keys(); });
  m.def("normalize_config", [](const std::string& text) { return config_from(text).to_text(); },
        py::arg("text"), "Parse, validate and re-emit a run config with every key filled in.");

  // ---- data ----
  py::class_<VolumeRecord>(m, "Volume")
      .def_readonly("patient_id", &VolumeRecord::patient_id)
      .def_property_readonly("class_ids", [](const VolumeRecord& v) { return v.class_ids; })
      .def_property_readonly("num_slices", &VolumeRecord::num_slices)
      .def("image", [](const VolumeRecord& v, std::size_t s) { return from_image(v.slices.at(s)); }, py::arg("slice"))
      .def("mask", [](const VolumeRecord& v, int cls, std::size_t s) { return from_mask(v.mask(cls, s)); },
           py::arg("class_id"), py::arg("slice"));

  m.def("synthesize", [](const std::string& text) { return generate_synthetic_corpus(config_from(text).corpus); },
        py::arg("config") = "", "Synthetic corpus described by the corpus.* keys.");
  m.def("write_dataset", &write_dataset, py::arg("root"), py::arg("dataset"));
  m.def("read_dataset", &read_dataset, py::arg("root"));

  // ---- metrics and protocol ----
  m.def("dice", [](const U8& p, const U8& g) { return dice(to_mask(p), to_mask(g)); }, py::arg("pred"), py::arg("gt"));
  m.def("hd95", [](const U8& p, const U8& g) { return hd95(to_mask(p), to_mask(g)); }, py::arg("pred"), py::arg("gt"));
  m.def("assd", [](const U8& p, const U8& g) { return assd(to_mask(p), to_mask(g)); }, py::arg("pred"), py::arg("gt"));
  m.def(
      "split_three",
      [](int n) {
        std::vector<py::tuple> out;
        for (const Part& p : split_three(n)) out.push_back(py::make_tuple(p.begin, p.end, p.middle()));
        return out;
      },
      py::arg("n"), "Three consecutive parts of n slices as (begin, end, middle) tuples.");

  // ---- query enhancement on latents (1, c, h, w) ----
  m.def("masked_average_pool", [](const F64& z, const U8& mask) { return masked_average_pool(to_tensor(z), to_mask(mask)); },
        py::arg("latent"), py::arg("mask"));
  m.def("cosine_similarity_map",
        [](const std::vector<double>& p, const F64& z) { return from_tensor(cosine_similarity_map(p, to_tensor(z))); },
        py::arg("prototype"), py::arg("latent"));
  m.def(
      "extract_query_prototype",
      [](const F64& z, const F64& prob, double tau) {
        return extract_query_prototype(to_tensor(z), to_tensor(prob), tau);
      },
      py::arg("latent"), py::arg("prob"), py::arg("tau") = 0.7);
  m.def("enhance_query",
        [](const F64& z, const std::vector<double>& p) { return from_tensor(enhance_query(to_tensor(z), p)); },
        py::arg("latent"), py::arg("prototype"));

  // ---- codec ----
  py::class_<LatentCodec>(m, "LatentCodec")
      .def_static("identity", &LatentCodec::identity)
      .def_static("load", &LatentCodec::load, py::arg("path"))
      .def("save", &LatentCodec::save, py::arg("path"))
      .def_property_readonly("downsample_factor", &LatentCodec::downsample_factor)
      .def_property_readonly("latent_channels", &LatentCodec::latent_channels)
      .def_property_readonly("latent_scale", &LatentCodec::latent_scale)
      .def("encode_image", [](const LatentCodec& c, const F64& img) { return from_tensor(c.encode_image(to_image(img))); },
           py::arg("image"))
      .def("encode_mask", [](const LatentCodec& c, const U8& mask) { return from_tensor(c.encode_mask(to_mask(mask))); },
           py::arg("mask"))
      .def("decode_mask", [](const LatentCodec& c, const F64& z) { return from_mask(c.decode_mask(to_tensor(z))); },
           py::arg("latent"))
      .def("decode_image", [](const LatentCodec& c, const F64& z) { return from_image(c.decode_image(to_tensor(z))); },
           py::arg("latent"));

  m.def(
      "train_codec",
      [](const Dataset& ds, const std::string& text) {
        const RunConfig cfg = config_from(text);
        py::gil_scoped_release release;
        return train_codec(ds, cfg.codec_arch, cfg.codec_train);
      },
      py::arg("dataset"), py::arg("config") = "");
  m.def(
      "reconstruction_table",
      [](const LatentCodec& codec, const Dataset& ds, std::size_t max_slices) {
        return format_recon_table("dataset", reconstruction_study(codec, ds, max_slices));
      },
      py::arg("codec"), py::arg("dataset"), py::arg("max_slices") = 0);

  // ---- model ----
  py::class_<SegmentationModel>(m, "SegmentationModel")
      .def(py::init([](const LatentCodec& codec, const std::string& text) {
             RunConfig cfg = config_from(text);
             cfg.model.denoiser.latent_channels = codec.latent_channels();
             cfg.model.vision.patch = codec.downsample_factor();
             return SegmentationModel(cfg.model, codec);
           }),
           py::arg("codec"), py::arg("config") = "")
      .def_static("load", &SegmentationModel::load, py::arg("path"))
      .def("save", &SegmentationModel::save, py::arg("path"))
      .def(
          "predict",
          [](const SegmentationModel& model, const std::vector<F64>& support_images, const std::vector<U8>& support_masks,
             const F64& query, const std::string& condition) {
            std::vector<SliceImage> images;
            std::vector<BinaryMask> masks;
            for (const auto& a : support_images) images.push_back(to_image(a));
            for (const auto& a : support_masks) masks.push_back(to_mask(a));
            const SliceImage q = to_image(query);
            const ConditionMode mode = parse_condition_mode(condition);
            BinaryMask out;
            {
              py::gil_scoped_release release;
              out = model.predict_mask(images, masks, q, mode);
            }
            return from_mask(out);
          },
          py::arg("support_images"), py::arg("support_masks"), py::arg("query"), py::arg("condition") = "projected",
          "Binary mask for the query given K support pairs.");

  m.def(
      "train",
      [](SegmentationModel& model, const Dataset& ds, const std::string& text, const std::string& checkpoint_dir) {
        const RunConfig cfg = config_from(text);
        TrainOptions opt;
        opt.checkpoint_dir = checkpoint_dir;
        py::gil_scoped_release release;
        return run_training(model, ds, cfg.train_classes(dataset_classes(ds)), cfg.train, opt).losses;
      },
      py::arg("model"), py::arg("dataset"), py::arg("config") = "", py::arg("checkpoint_dir") = "",
      "Episodic training on every class except eval.test_classes. Returns the per-step losses.");

  m.def(
      "evaluate",
      [](const SegmentationModel& model, const Dataset& ds, const std::string& text) {
        const RunConfig cfg = config_from(text);
        MetricReport report;
        {
          py::gil_scoped_release release;
          report = evaluate(model, ds, cfg.eval_spec());
        }
        py::dict out;
        out["dice"] = report.mean_dice;
        out["hd95"] = report.mean_hd95;
        out["assd"] = report.mean_assd;
        out["episodes"] = report.episodes;
        out["text"] = report.to_text();
        out["csv"] = report.to_csv();
        return out;
      },
      py::arg("model"), py::arg("dataset"), py::arg("config") = "",
      "Held-out class evaluation of eval.test_classes.");
}
