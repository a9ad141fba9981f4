// Python bindings for the geometry, aggregation, cost and metric operations.

#include <cstring>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "sala/aggregation.hpp"
#include "sala/config.hpp"
#include "sala/cost.hpp"
#include "sala/experiment.hpp"
#include "sala/geometry.hpp"
#include "sala/gradcheck_suite.hpp"
#include "sala/training.hpp"

namespace py = pybind11;
using namespace sala;

namespace {

template <class T>
using Array = py::array_t<T, py::array::c_style | py::array::forcecast>;

void require_shape(const py::buffer_info& b, std::size_t ndim, py::ssize_t last, const char* what) {
  if (std::size_t(b.ndim) != ndim || (last >= 0 && b.shape[b.ndim - 1] != last)) {
    throw py::value_error(std::string(what) + " has the wrong shape");
  }
}

PointCloud to_cloud(const Array<float>& positions, const std::optional<Array<float>>& features,
                    const std::optional<Array<std::uint32_t>>& labels) {
  const auto p = positions.request();
  require_shape(p, 2, 3, "positions");
  const auto n = std::size_t(p.shape[0]);
  PointCloud c;
  const float* pv = static_cast<const float*>(p.ptr);
  for (std::size_t i = 0; i < n; ++i) c.positions.push_back({pv[3 * i], pv[3 * i + 1], pv[3 * i + 2]});
  if (features) {
    const auto f = features->request();
    require_shape(f, 2, -1, "features");
    if (std::size_t(f.shape[0]) != n) throw py::value_error("features and positions differ in length");
    c.feat_dim = std::size_t(f.shape[1]);
    const float* fv = static_cast<const float*>(f.ptr);
    c.features.assign(fv, fv + n * c.feat_dim);
  }
  if (labels) {
    const auto l = labels->request();
    require_shape(l, 1, py::ssize_t(n), "labels");
    const auto* lv = static_cast<const std::uint32_t*>(l.ptr);
    c.labels.emplace(lv, lv + n);
  }
  return c;
}

py::dict from_cloud(const PointCloud& c) {
  py::dict d;
  Array<float> pos({py::ssize_t(c.size()), py::ssize_t(3)});
  std::memcpy(pos.mutable_data(), c.positions.data(), c.size() * 3 * sizeof(float));
  d["positions"] = pos;
  Array<float> feat({py::ssize_t(c.size()), py::ssize_t(c.feat_dim)});
  std::copy(c.features.begin(), c.features.end(), feat.mutable_data());
  d["features"] = feat;
  if (c.labels) d["labels"] = Array<std::uint32_t>(py::ssize_t(c.size()), c.labels->data());
  else d["labels"] = py::none();
  return d;
}

NetworkSpec spec_of(std::size_t width, std::size_t num_classes) {
  NetworkSpec s;
  s.width = width;
  s.num_classes = num_classes;
  return s;
}

AggregatorConfig agg_of(const std::string& family, std::size_t groups) {
  AggregatorConfig a;
  a.family = parse_family(family);
  a.groups = groups;
  return a;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "SALA point-cloud segmentation: geometry, aggregation, cost and metrics";

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);
  py::register_exception<EmptyNeighborhoodError>(m, "EmptyNeighborhoodError", PyExc_RuntimeError);

  m.def(
      "grid_subsample",
      [](const Array<float>& positions, double grid_size, const std::optional<Array<float>>& features,
         const std::optional<Array<std::uint32_t>>& labels) {
        return from_cloud(grid_subsample(to_cloud(positions, features, labels), grid_size));
      },
      py::arg("positions"), py::arg("grid_size"), py::arg("features") = py::none(), py::arg("labels") = py::none(),
      "Voxel-grid barycenters; features are averaged and labels take the majority.");

  m.def(
      "ball_query",
      [](const Array<float>& centers, const Array<float>& support, double radius, std::size_t k_max,
         const std::string& select, std::uint64_t seed) {
        if (select != "nearest" && select != "random") throw py::value_error("select must be nearest or random");
        BallQueryOptions o{.k_max = k_max, .select = select == "random" ? NeighborSelect::Random : NeighborSelect::Nearest,
                           .seed = seed};
        const auto nbr = ball_query(to_cloud(centers, {}, {}), to_cloud(support, {}, {}), radius, o);
        const py::ssize_t n = py::ssize_t(nbr.centers), k = py::ssize_t(nbr.k);
        Array<std::int32_t> idx({n, k});
        Array<bool> mask({n, k});
        std::copy(nbr.indices.begin(), nbr.indices.end(), idx.mutable_data());
        std::copy(nbr.mask.begin(), nbr.mask.end(), mask.mutable_data());
        return py::make_tuple(idx, mask);
      },
      py::arg("centers"), py::arg("support"), py::arg("radius"), py::arg("k_max") = 32, py::arg("select") = "nearest",
      py::arg("seed") = 0, "Neighbor indices (N, k) and validity mask within `radius` of each center.");

  m.def(
      "nn_interpolate_map",
      [](const Array<float>& fine, const Array<float>& coarse) {
        const auto map = nn_interpolate_map(to_cloud(fine, {}, {}), to_cloud(coarse, {}, {}));
        return Array<std::int32_t>(py::ssize_t(map.size()), map.data());
      },
      py::arg("fine"), py::arg("coarse"), "Index of the nearest coarse point for every fine point.");

  m.def(
      "kpconv_influence",
      [](const Array<double>& rel, const std::vector<std::array<double, 3>>& kernel_points, double sigma) {
        const auto b = rel.request();
        require_shape(b, 3, 3, "rel");
        const Shape shape{std::size_t(b.shape[0]), std::size_t(b.shape[1]), 3};
        const TensorD t(shape, std::vector<double>(rel.data(), rel.data() + rel.size()));
        const TensorD h = kpconv_influence(t, std::span(kernel_points), sigma);
        Array<double> out({b.shape[0], b.shape[1], py::ssize_t(kernel_points.size())});
        std::copy(h.data().begin(), h.data().end(), out.mutable_data());
        return out;
      },
      py::arg("rel"), py::arg("kernel_points"), py::arg("sigma"), "Linear influence max(0, 1 - |r - x| / sigma).");

  m.def(
      "soft_assign",
      [](const Array<double>& r, const Array<double>& w, const Array<double>& b) {
        const auto rb = r.request(), wb = w.request(), bb = b.request();
        require_shape(rb, 3, -1, "r");
        require_shape(wb, 2, -1, "w");
        if (wb.shape[0] != rb.shape[2]) throw py::value_error("w must have one row per encoding channel of r");
        require_shape(bb, 1, wb.shape[1], "b");
        auto tensor = [](const Array<double>& a, const py::buffer_info& info) {
          return TensorD(Shape(info.shape.begin(), info.shape.end()), std::vector<double>(a.data(), a.data() + a.size()));
        };
        const std::vector<std::uint8_t> mask(std::size_t(rb.shape[0] * rb.shape[1]), 1);
        TapeD tape(false);
        const TensorD q =
            soft_assign(tape.constant(tensor(r, rb)), tape.constant(tensor(w, wb)), tape.constant(tensor(b, bb)), mask)
                .value();
        Array<double> out({rb.shape[0], rb.shape[1], wb.shape[1]});
        std::copy(q.data().begin(), q.data().end(), out.mutable_data());
        return out;
      },
      py::arg("r"), py::arg("w"), py::arg("b"), "Group assignment softmax(r w + b) over the last axis.");

  m.def(
      "count_params",
      [](std::size_t width, std::size_t groups, const std::string& family, std::size_t num_classes) {
        return count_params(spec_of(width, num_classes), agg_of(family, groups)).params;
      },
      py::arg("width") = 36, py::arg("groups") = 2, py::arg("family") = "sala", py::arg("num_classes") = 13);

  m.def(
      "count_macs",
      [](const std::vector<std::size_t>& point_counts, std::size_t k, std::size_t width, std::size_t groups,
         const std::string& family, std::size_t num_classes) {
        return count_macs(spec_of(width, num_classes), agg_of(family, groups), point_counts, k).macs;
      },
      py::arg("point_counts"), py::arg("k") = 32, py::arg("width") = 36, py::arg("groups") = 2,
      py::arg("family") = "sala", py::arg("num_classes") = 13);

  m.def(
      "profile_json", [](const std::string& config_text) { return profile_model(parse_config_text(config_text)).to_json(); },
      py::arg("config_text"), "Cost report of a config, as JSON.");

  m.def(
      "normalize_config", [](const std::string& text) { return emit_config(parse_config_text(text)); },
      py::arg("text"), "Parses a config and emits every key with its resolved value.");

  m.def(
      "miou",
      [](const Array<std::uint64_t>& confusion) {
        const auto b = confusion.request();
        if (b.ndim != 2 || b.shape[0] != b.shape[1]) throw py::value_error("confusion must be square");
        const auto n = std::size_t(b.shape[0]);
        ConfusionMatrix cm(n);
        for (std::size_t t = 0; t < n; ++t)
          for (std::size_t p = 0; p < n; ++p) cm.add(std::uint32_t(t), std::uint32_t(p), confusion.at(t, p));
        const IouResult r = miou(cm);
        std::vector<std::optional<double>> per_class;
        for (std::size_t c = 0; c < n; ++c) per_class.push_back(r.valid[c] ? std::optional(r.per_class[c]) : std::nullopt);
        return py::make_tuple(r.mean, per_class);
      },
      py::arg("confusion"), "Mean IoU and per-class IoU (None where undefined) of a confusion matrix.");

  m.def(
      "gradcheck",
      [](std::size_t seeds, const std::vector<std::string>& only) {
        std::vector<py::dict> out;
        for (const auto& c : run_gradcheck_suite({.seeds = seeds, .eps = 1e-3, .tolerance = 1e-3, .only = only})) {
          py::dict d;
          d["operator"] = c.name;
          d["passed"] = c.passed;
          d["max_rel_error"] = c.max_rel_error;
          d["checked"] = c.checked;
          out.push_back(d);
        }
        return out;
      },
      py::arg("seeds") = 5, py::arg("only") = std::vector<std::string>{}, "Finite-difference checks per operator.");

  m.def("gradcheck_operators", &gradcheck_operators);
}
