// lidarmerge: command-line front end for the lidarmerge library.

#include "lidarmerge/lidarmerge.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace lm = lidarmerge;
using json = nlohmann::ordered_json;

namespace {

constexpr int kExitError = 1;
constexpr int kExitUsage = 2;
constexpr int kExitGradCheck = 3;

struct Globals {
  std::string config_path;
  unsigned threads = 1;
};

lm::config::ToolConfig load_config(const Globals& g) {
  if (g.config_path.empty()) return {};
  return lm::config::load_tool_config(g.config_path);
}

lm::config::LabelSpaceConfig load_space(const std::string& explicit_path, const lm::config::ToolConfig& cfg) {
  if (!explicit_path.empty()) return lm::config::load_label_space(explicit_path);
  if (cfg.label_space_path) return lm::config::load_label_space(*cfg.label_space_path);
  throw lm::Error(lm::ErrorKind::config, "cli", "no label space: pass --space or set label_space in the config");
}

std::string real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

double percent(double fraction) { return std::round(fraction * 100.0 * 1e4) / 1e4; }

json percent_or_null(const std::optional<double>& v) { return v ? json(percent(*v)) : json(nullptr); }

void write_output(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    std::cout.flush();
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw lm::Error(lm::ErrorKind::invalid_input, "cli", "cannot write " + path);
  out << text;
}

void write_labels(const std::string& path, std::span<const lm::ClassId> semantic,
                  std::span<const lm::InstanceId> instance) {
  const auto bytes = lm::io::encode_kitti_label(semantic, instance);
  write_output(path, std::string(bytes.begin(), bytes.end()));
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Clouds come as KITTI .bin, nuScenes .pcd.bin, or an N x 3 / N x 4 tensor.
lm::PointCloud read_cloud(const std::string& path, const std::string& format) {
  std::string fmt = format;
  if (fmt == "auto") {
    if (lm::io::has_tensor_magic(path)) {
      fmt = "tensor";
    } else if (ends_with(path, ".pcd.bin")) {
      fmt = "nuscenes";
    } else {
      fmt = "kitti";
    }
  }
  if (fmt == "kitti") return lm::io::read_kitti_bin(path);
  if (fmt == "nuscenes") return lm::io::read_nuscenes_bin(path);
  if (fmt == "tensor") {
    const auto m = lm::io::read_matrix(path);
    if (m.cols() != 3 && m.cols() != 4) {
      throw lm::Error(lm::ErrorKind::schema, "cli", path + ": cloud tensor needs 3 or 4 columns");
    }
    lm::PointCloud cloud;
    cloud.coords.resize(static_cast<std::size_t>(m.rows()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) cloud.coords[static_cast<std::size_t>(i)] = m.row(i).head<3>().transpose();
    if (m.cols() == 4) {
      cloud.intensity.emplace();
      for (Eigen::Index i = 0; i < m.rows(); ++i) cloud.intensity->push_back(static_cast<float>(m(i, 3)));
    }
    return cloud;
  }
  throw lm::Error(lm::ErrorKind::parameter, "cli", "unknown cloud format '" + format + "'");
}

std::vector<lm::ClassId> read_ids(const std::string& path) {
  if (lm::io::has_tensor_magic(path)) return lm::io::to_class_ids(lm::io::read_tensor_file(path), path);
  return lm::io::read_kitti_label(path).semantic;
}

lm::panoptic::PanopticLabels read_panoptic(const std::string& path) {
  if (lm::io::has_tensor_magic(path)) {
    const auto t = lm::io::read_tensor_file(path);
    if (t.shape.size() != 2 || t.shape[1] != 2) {
      throw lm::Error(lm::ErrorKind::schema, "cli", path + ": panoptic tensor must be N x 2 (semantic, instance)");
    }
    const auto ids = lm::io::to_class_ids(t, path);
    lm::panoptic::PanopticLabels out;
    for (std::size_t i = 0; i + 1 < ids.size(); i += 2) {
      out.semantic.push_back(ids[i]);
      out.instance.push_back(ids[i + 1]);
    }
    return out;
  }
  auto packed = lm::io::read_kitti_label(path);
  return {std::move(packed.semantic), std::move(packed.instance)};
}

std::vector<bool> thing_mask_from(const std::vector<lm::ClassId>& things, std::size_t classes) {
  std::vector<bool> mask(classes, false);
  for (auto c : things) {
    if (c >= classes) throw lm::Error(lm::ErrorKind::out_of_range, "cli", "thing class " + std::to_string(c) + " >= class count");
    mask[c] = true;
  }
  return mask;
}

std::size_t classes_spanned(std::span<const lm::ClassId> ids, lm::ClassId ignore) {
  std::size_t q = 0;
  for (auto id : ids) {
    if (id != ignore) q = std::max<std::size_t>(q, id + 1);
  }
  return q;
}

// ---------------------------------------------------------------- project

struct ProjectOpts {
  std::string cloud, calib, out, format = "auto";
};

int run_project(const Globals& g, const ProjectOpts& o) {
  const auto cloud = read_cloud(o.cloud, o.format);
  cloud.validate();
  const auto cams = lm::geometry::load_calibration(o.calib);
  const auto pairs = lm::geometry::pair_points_pixels(cloud, cams, {g.threads});
  std::string csv = "point,camera,u,v,depth\n";
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    csv += std::to_string(pairs.point_indices[k]) + "," + std::to_string(pairs.camera_index[k]) + "," +
           std::to_string(pairs.pixel_coords[k].u) + "," + std::to_string(pairs.pixel_coords[k].v) + "," +
           real(pairs.depth[k]) + "\n";
  }
  write_output(o.out, csv);
  return 0;
}

// --------------------------------------------------------------- voxelize

struct VoxelizeOpts {
  std::string cloud, out, downsample, dataset, format = "auto";
  std::vector<double> voxel_size;
};

lm::Vec3 voxel_from(const std::vector<double>& v) {
  if (v.size() == 1) return lm::Vec3::Constant(v[0]);
  if (v.size() == 3) return {v[0], v[1], v[2]};
  throw lm::Error(lm::ErrorKind::parameter, "cli", "--voxel-size takes one or three values");
}

int run_voxelize(const Globals& g, const VoxelizeOpts& o) {
  const auto cfg = load_config(g);
  auto cloud = read_cloud(o.cloud, o.format);
  lm::Vec3 voxel = lm::Vec3::Constant(0.05);
  if (!o.dataset.empty()) {
    const auto& prof = cfg.profile(o.dataset);
    cloud = lm::dataspace::apply_origin_offset(std::move(cloud), prof);
    voxel = prof.voxel_size;
  }
  if (!o.voxel_size.empty()) voxel = voxel_from(o.voxel_size);
  if (o.dataset.empty() && o.voxel_size.empty()) {
    throw lm::Error(lm::ErrorKind::parameter, "cli", "pass --voxel-size or --dataset");
  }
  const auto grid = lm::dataspace::voxelize(cloud, voxel);
  std::string csv = "cell_x,cell_y,cell_z,count,first_point\n";
  for (std::size_t c = 0; c < grid.cell_count(); ++c) {
    const auto k = grid.key(c);
    const auto members = grid.members(c);
    csv += std::to_string(k.x) + "," + std::to_string(k.y) + "," + std::to_string(k.z) + "," +
           std::to_string(members.size()) + "," + std::to_string(members.front()) + "\n";
  }
  write_output(o.out, csv);
  if (!o.downsample.empty()) {
    lm::io::write_kitti_bin(lm::dataspace::downsample_one_per_voxel(grid, cloud), o.downsample);
  }
  return 0;
}

// ------------------------------------------------------------------ stats

struct StatsOpts {
  std::string cloud, labels, out, format = "auto";
  std::optional<double> bin_width, max_range;
  std::optional<std::size_t> classes;
  std::optional<lm::ClassId> ignore;
};

int run_stats(const Globals& g, const StatsOpts& o) {
  const auto cfg = load_config(g);
  auto cloud = read_cloud(o.cloud, o.format);
  cloud.semantic = read_ids(o.labels);
  if (cloud.semantic->size() != cloud.size()) {
    throw lm::Error(lm::ErrorKind::length_mismatch, "cli",
                    o.labels + ": " + std::to_string(cloud.semantic->size()) + " labels for " +
                        std::to_string(cloud.size()) + " points");
  }
  const lm::ClassId ignore = o.ignore.value_or(cfg.ignore_id);
  const std::size_t q = o.classes.value_or(classes_spanned(*cloud.semantic, ignore));
  const double width = o.bin_width.value_or(cfg.histogram_bin_width);
  const auto hist =
      lm::dataspace::range_class_histogram(cloud, width, o.max_range.value_or(cfg.histogram_max_range), q, ignore);
  std::string csv = "class,bin_lo,bin_hi,count\n";
  for (std::size_t c = 0; c < hist.counts.size(); ++c) {
    for (std::size_t b = 0; b < hist.bin_count; ++b) {
      csv += std::to_string(c) + "," + real(static_cast<double>(b) * width) + "," +
             real(static_cast<double>(b + 1) * width) + "," + std::to_string(hist.counts[c][b]) + "\n";
    }
  }
  write_output(o.out, csv);
  return 0;
}

// ------------------------------------------------------------------ remap

struct RemapOpts {
  std::string space, dataset, labels, out;
};

int run_remap(const Globals& g, const RemapOpts& o) {
  const auto cfg = load_config(g);
  const auto ls = load_space(o.space, cfg);
  auto packed = lm::io::read_kitti_label(o.labels);
  const auto unified = lm::labelspace::remap_labels(packed.semantic, ls.space, o.dataset);
  write_labels(o.out, unified, packed.instance);
  return 0;
}

// ----------------------------------------------------------------- losses

struct LossesOpts {
  std::string spec, out, grad_out, space, dataset;
  std::vector<std::string> inputs;
  bool grad_check = false;
  std::optional<bool> normalize_embeddings;
};

struct LossSpec {
  std::string kind;
  lm::losses::ContrastiveOptions contrastive;
  lm::ClassId ignore_id = lm::kDefaultIgnoreId;
  std::string dataset;
  std::vector<std::pair<std::string, double>> parts;
  double step = lm::gradcheck::kDefaultStep;
  double tolerance = lm::gradcheck::kDefaultTolerance;
};

LossSpec parse_loss_spec(const std::string& path, const lm::config::ToolConfig& cfg) {
  namespace c = lm::config;
  const auto doc = c::load_document(path);
  LossSpec s;
  s.contrastive = cfg.contrastive;
  s.ignore_id = cfg.ignore_id;
  for (const auto& t : doc.tables) {
    if (t.name.empty()) {
      c::reject_unknown(doc, t, {"kind", "tau", "normalize_embeddings", "ignore_id", "dataset", "step", "tolerance"});
      if (const auto* v = t.find("kind")) s.kind = c::as_string(doc, *v, "kind");
      if (const auto* v = t.find("tau")) s.contrastive.tau = c::as_number(doc, *v, "tau");
      if (const auto* v = t.find("normalize_embeddings")) {
        s.contrastive.normalize_embeddings = c::as_bool(doc, *v, "normalize_embeddings");
      }
      if (const auto* v = t.find("ignore_id")) s.ignore_id = static_cast<lm::ClassId>(c::as_count(doc, *v, "ignore_id"));
      if (const auto* v = t.find("dataset")) s.dataset = c::as_string(doc, *v, "dataset");
      if (const auto* v = t.find("step")) s.step = c::as_number(doc, *v, "step");
      if (const auto* v = t.find("tolerance")) s.tolerance = c::as_number(doc, *v, "tolerance");
    } else if (t.name == "parts") {
      for (const auto& [k, v] : t.entries) s.parts.emplace_back(k, c::as_number(doc, v, k));
    } else {
      c::fail(doc.source, t.line, "unknown section [" + t.name + "]");
    }
  }
  if (s.kind.empty()) c::fail(doc.source, 1, "'kind' is required");
  return s;
}

struct Evaluation {
  double value = 0.0;
  std::vector<lm::FeatureMatrix> gradients;
  std::vector<std::pair<std::string, double>> components;
};

using Evaluator = std::function<Evaluation(const std::vector<lm::FeatureMatrix>&, bool)>;

struct LossProblem {
  std::vector<lm::FeatureMatrix> inputs;  // differentiable inputs
  Evaluator evaluate;
};

void need_inputs(const std::string& kind, const std::vector<std::string>& files, std::size_t lo, std::size_t hi,
                 const char* usage) {
  if (files.size() < lo || files.size() > hi) {
    throw lm::Error(lm::ErrorKind::parameter, "cli", "'" + kind + "' expects inputs: " + usage);
  }
}

std::vector<bool> negative_mask(const LossSpec& s, const LossesOpts& o, const lm::config::ToolConfig& cfg,
                                const std::vector<std::string>& files, std::size_t mask_pos, Eigen::Index q) {
  std::vector<bool> mask(static_cast<std::size_t>(q), true);
  const std::string dataset = o.dataset.empty() ? s.dataset : o.dataset;
  if (!dataset.empty()) {
    const auto ls = load_space(o.space, cfg);
    mask = lm::labelspace::dataset_negative_mask(ls.space, dataset);
    if (mask.size() != static_cast<std::size_t>(q)) {
      throw lm::Error(lm::ErrorKind::length_mismatch, "cli", "text embeddings do not match the label space size");
    }
  } else if (files.size() > mask_pos) {
    const auto ids = lm::io::to_class_ids(lm::io::read_tensor_file(files[mask_pos]), files[mask_pos]);
    if (ids.size() != mask.size()) throw lm::Error(lm::ErrorKind::length_mismatch, "cli", "mask needs one entry per class");
    for (std::size_t k = 0; k < ids.size(); ++k) mask[k] = ids[k] != 0;
  }
  return mask;
}

LossProblem build_problem(const LossSpec& s, const LossesOpts& o, const lm::config::ToolConfig& cfg) {
  namespace L = lm::losses;
  const auto& f = o.inputs;
  auto mat = [&](std::size_t k) { return lm::io::read_matrix(f.at(k)); };
  auto ids = [&](std::size_t k) { return read_ids(f.at(k)); };
  LossProblem p;
  if (s.kind == "cosine") {
    need_inputs(s.kind, f, 2, 2, "a b");
    p.inputs = {mat(0), mat(1)};
    p.evaluate = [](const std::vector<lm::FeatureMatrix>& in, bool) {
      auto r = L::cosine_alignment_loss(in[0], in[1]);
      return Evaluation{r.value, r.gradients, {}};
    };
  } else if (s.kind == "text_contrastive") {
    need_inputs(s.kind, f, 3, 4, "items text classes [mask]");
    p.inputs = {mat(0)};
    auto text = mat(1);
    auto classes = ids(2);
    auto mask = negative_mask(s, o, cfg, f, 3, text.rows());
    p.evaluate = [=, opts = s.contrastive](const std::vector<lm::FeatureMatrix>& in, bool) {
      auto r = L::text_contrastive_loss(in[0], text, classes, mask, opts);
      return Evaluation{r.value, r.gradients, {}};
    };
  } else if (s.kind == "label_alignment") {
    need_inputs(s.kind, f, 7, 8,
                "point_logits pixel_logits point_feats pixel_feats text point_classes pixel_classes [mask]");
    p.inputs = {mat(0), mat(1), mat(2), mat(3)};
    auto text = mat(4);
    auto point_classes = ids(5);
    auto pixel_classes = ids(6);
    auto mask = negative_mask(s, o, cfg, f, 7, text.rows());
    p.evaluate = [=, opts = s.contrastive](const std::vector<lm::FeatureMatrix>& in, bool) {
      const L::LabelAlignmentInputs li{in[0], in[1], in[2], in[3], text, point_classes, pixel_classes, mask, opts};
      auto r = L::label_alignment_loss(li);
      return Evaluation{r.value,
                        r.gradients(),
                        {{"point_text", r.point_text.value},
                         {"pixel_point", r.pixel_point.value},
                         {"pixel_text", r.pixel_text.value}}};
    };
  } else if (s.kind == "cross_entropy") {
    need_inputs(s.kind, f, 2, 2, "logits targets");
    p.inputs = {mat(0)};
    auto targets = ids(1);
    p.evaluate = [=, ignore = s.ignore_id](const std::vector<lm::FeatureMatrix>& in, bool) {
      auto r = L::cross_entropy_loss(in[0], targets, ignore);
      return Evaluation{r.value, r.gradients, {}};
    };
  } else if (s.kind == "lovasz") {
    need_inputs(s.kind, f, 2, 2, "probs targets");
    p.inputs = {mat(0)};
    auto targets = ids(1);
    p.evaluate = [=, ignore = s.ignore_id](const std::vector<lm::FeatureMatrix>& in, bool perturbed) {
      auto r = L::lovasz_softmax_loss(in[0], targets, ignore, {.check_probabilities = !perturbed});
      return Evaluation{r.value, r.gradients, {}};
    };
  } else if (s.kind == "l1") {
    need_inputs(s.kind, f, 3, 3, "pred target mask");
    p.inputs = {mat(0)};
    auto target = mat(1);
    const auto m = ids(2);
    std::vector<bool> mask(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) mask[i] = m[i] != 0;
    p.evaluate = [=](const std::vector<lm::FeatureMatrix>& in, bool) {
      auto r = L::l1_offset_loss(in[0], target, mask);
      return Evaluation{r.value, r.gradients, {}};
    };
  } else if (s.kind == "objective") {
    need_inputs(s.kind, f, 0, 0, "none (parts come from the spec)");
    auto parts = s.parts;
    p.evaluate = [=](const std::vector<lm::FeatureMatrix>&, bool) {
      auto r = L::total_objective(parts);
      return Evaluation{r.total, {}, r.parts};
    };
  } else {
    throw lm::Error(lm::ErrorKind::parameter, "cli",
                    "unknown loss kind '" + s.kind +
                        "' (cosine, text_contrastive, label_alignment, cross_entropy, lovasz, l1, objective)");
  }
  return p;
}

int run_losses(const Globals& g, const LossesOpts& o) {
  const auto cfg = load_config(g);
  auto spec = parse_loss_spec(o.spec, cfg);
  if (o.normalize_embeddings) spec.contrastive.normalize_embeddings = *o.normalize_embeddings;
  const auto problem = build_problem(spec, o, cfg);
  const auto result = problem.evaluate(problem.inputs, false);

  json report;
  report["kind"] = spec.kind;
  report["value"] = result.value;
  if (!result.components.empty()) {
    json comps = json::object();
    for (const auto& [k, v] : result.components) comps[k] = v;
    report["components"] = comps;
  }
  json norms = json::array();
  for (const auto& gm : result.gradients) norms.push_back(gm.norm());
  report["gradient_norms"] = norms;

  bool passed = true;
  if (o.grad_check && !result.gradients.empty()) {
    const lm::gradcheck::Objective f = [&](const std::vector<lm::FeatureMatrix>& in) {
      return problem.evaluate(in, true).value;
    };
    const auto check = lm::gradcheck::check(f, problem.inputs, result.gradients, spec.step);
    passed = check.passed(spec.tolerance);
    report["grad_check"] = {{"step", spec.step},
                            {"tolerance", spec.tolerance},
                            {"relative_errors", check.errors},
                            {"max_relative_error", check.max_error},
                            {"passed", passed}};
  }
  if (!o.grad_out.empty()) {
    std::filesystem::create_directories(o.grad_out);
    for (std::size_t k = 0; k < result.gradients.size(); ++k) {
      lm::io::write_matrix(result.gradients[k], (std::filesystem::path(o.grad_out) / ("grad_" + std::to_string(k) + ".lmtf")).string());
    }
  }
  write_output(o.out, dump(report));
  if (!passed) {
    std::cerr << "lidarmerge: gradient check failed\n";
    return kExitGradCheck;
  }
  return 0;
}

// ---------------------------------------------------------------- cluster

struct ClusterOpts {
  std::string coords, offsets, semantic, out, space, dataset, format = "auto", summary;
  std::optional<double> bandwidth;
  std::vector<lm::ClassId> things;
};

int run_cluster(const Globals& g, const ClusterOpts& o) {
  const auto cfg = load_config(g);
  const auto cloud = read_cloud(o.coords, o.format);
  cloud.validate();
  const auto offsets_m = lm::io::read_matrix(o.offsets);
  if (offsets_m.cols() != 3 || static_cast<std::size_t>(offsets_m.rows()) != cloud.size()) {
    throw lm::Error(lm::ErrorKind::length_mismatch, "cli", o.offsets + ": offsets must be N x 3 for N points");
  }
  std::vector<lm::Vec3> offsets(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) offsets[i] = offsets_m.row(static_cast<Eigen::Index>(i)).transpose();
  const auto semantic = read_ids(o.semantic);
  if (semantic.size() != cloud.size()) {
    throw lm::Error(lm::ErrorKind::length_mismatch, "cli", o.semantic + ": one label per point is required");
  }

  auto icfg = cfg.cluster;
  std::optional<double> bw = o.bandwidth;
  if (!bw && !o.dataset.empty()) bw = cfg.profile(o.dataset).bandwidth;
  if (!bw) {
    throw lm::Error(lm::ErrorKind::config, "cli",
                    "no mean-shift bandwidth: pass --bandwidth or a --dataset whose profile sets one");
  }
  icfg.bandwidth = *bw;

  std::vector<bool> mask;
  if (!o.things.empty()) {
    mask = thing_mask_from(o.things, std::max(classes_spanned(semantic, cfg.ignore_id),
                                              static_cast<std::size_t>(*std::max_element(o.things.begin(), o.things.end())) + 1));
  } else {
    mask = load_space(o.space, cfg).space.thing_mask();
  }
  const auto labels = lm::panoptic::extract_instances(cloud.coords, offsets, semantic, mask, icfg, {g.threads});
  write_labels(o.out, labels.semantic, labels.instance);

  lm::InstanceId k = 0;
  std::size_t thing_points = 0;
  for (auto id : labels.instance) {
    k = std::max(k, id);
    thing_points += id > 0 ? 1 : 0;
  }
  json report{{"points", cloud.size()}, {"thing_points", thing_points}, {"instances", k}, {"bandwidth", icfg.bandwidth}};
  // With the labels on stdout the summary only goes to an explicit file.
  if (!(o.out.empty() || o.out == "-") || !o.summary.empty()) write_output(o.summary, dump(report));
  return 0;
}

// --------------------------------------------------------------- eval-sem

struct EvalOpts {
  std::vector<std::string> gt, pred;
  std::string out, space;
  std::optional<std::size_t> classes;
  std::optional<lm::ClassId> ignore;
  std::vector<lm::ClassId> things;
};

void check_pairs(const EvalOpts& o) {
  if (o.gt.size() != o.pred.size()) {
    throw lm::Error(lm::ErrorKind::length_mismatch, "cli", "--gt and --pred need the same number of files");
  }
}

std::optional<std::vector<std::string>> class_names(const EvalOpts& o, const lm::config::ToolConfig& cfg, std::size_t q) {
  if (o.space.empty() && !cfg.label_space_path) return std::nullopt;
  auto ls = load_space(o.space, cfg);
  if (ls.space.size() != q) return std::nullopt;
  return ls.space.unified_names();
}

std::size_t resolve_classes(const EvalOpts& o, const lm::config::ToolConfig& cfg) {
  if (o.classes) return *o.classes;
  return load_space(o.space, cfg).space.size();
}

int run_eval_sem(const Globals& g, const EvalOpts& o) {
  check_pairs(o);
  const auto cfg = load_config(g);
  const std::size_t q = resolve_classes(o, cfg);
  const lm::ClassId ignore = o.ignore.value_or(cfg.ignore_id);

  std::vector<lm::metrics::ConfusionMatrix> partial(o.gt.size(), lm::metrics::ConfusionMatrix(q, ignore));
  std::vector<std::string> failures(o.gt.size());
  lm::parallel_for(o.gt.size(), {g.threads}, [&](std::size_t begin, std::size_t end) {
    for (std::size_t s = begin; s < end; ++s) {
      try {
        partial[s].add(read_ids(o.gt[s]), read_ids(o.pred[s]));
      } catch (const std::exception& e) {
        failures[s] = e.what();
      }
    }
  });
  lm::metrics::ConfusionMatrix cm(q, ignore);
  for (std::size_t s = 0; s < partial.size(); ++s) {
    if (!failures[s].empty()) throw lm::Error(lm::ErrorKind::invalid_input, "cli", o.gt[s] + ": " + failures[s]);
    cm.merge(partial[s]);
  }
  const auto scores = lm::metrics::semantic_scores(cm);
  const auto names = class_names(o, cfg, q);

  json per_class = json::array();
  json confusion = json::array();
  for (std::size_t c = 0; c < q; ++c) {
    json row{{"id", c}};
    if (names) row["name"] = (*names)[c];
    row["iou"] = percent_or_null(scores.iou[c]);
    row["acc"] = percent_or_null(scores.acc[c]);
    per_class.push_back(row);
    json counts = json::array();
    for (std::size_t p = 0; p < q; ++p) counts.push_back(cm.at(c, p));
    confusion.push_back(counts);
  }
  json unassigned = json::array();
  for (std::size_t c = 0; c < q; ++c) unassigned.push_back(cm.unassigned(c));
  json report{{"scans", o.gt.size()},
              {"classes", q},
              {"ignore_id", ignore},
              {"points", cm.total()},
              {"miou", percent_or_null(scores.miou)},
              {"macc", percent_or_null(scores.macc)},
              {"per_class", per_class},
              {"confusion", confusion},
              {"unassigned", unassigned}};
  write_output(o.out, dump(report));
  return 0;
}

// --------------------------------------------------------------- eval-pan

json aggregate_json(const lm::metrics::PanopticAggregate& a) {
  return {{"pq", percent_or_null(a.pq)}, {"sq", percent_or_null(a.sq)}, {"rq", percent_or_null(a.rq)}};
}

int run_eval_pan(const Globals& g, const EvalOpts& o) {
  check_pairs(o);
  const auto cfg = load_config(g);
  const std::size_t q = resolve_classes(o, cfg);
  const lm::ClassId ignore = o.ignore.value_or(cfg.ignore_id);
  const std::vector<bool> mask =
      o.things.empty() ? load_space(o.space, cfg).space.thing_mask() : thing_mask_from(o.things, q);
  if (mask.size() != q) {
    throw lm::Error(lm::ErrorKind::length_mismatch, "cli", "thing mask from the label space does not match --classes");
  }

  struct Partial {
    lm::metrics::PanopticStats stats;
    lm::metrics::ConfusionMatrix cm;
    std::string failure;
  };
  std::vector<Partial> partial(o.gt.size(),
                               Partial{{std::vector<lm::metrics::ClassPanopticStats>(q)}, lm::metrics::ConfusionMatrix(q, ignore), {}});
  lm::parallel_for(o.gt.size(), {g.threads}, [&](std::size_t begin, std::size_t end) {
    for (std::size_t s = begin; s < end; ++s) {
      try {
        auto gt = read_panoptic(o.gt[s]);
        auto pred = read_panoptic(o.pred[s]);
        // Stuff classes form a single segment whatever instance ids the files carry.
        for (auto* l : {&gt, &pred}) {
          for (std::size_t i = 0; i < l->semantic.size(); ++i) {
            if (l->semantic[i] < q && !mask[l->semantic[i]]) l->instance[i] = 0;
          }
        }
        partial[s].stats = lm::metrics::panoptic_match(gt, pred, q, ignore);
        partial[s].cm.add(gt.semantic, pred.semantic);
      } catch (const std::exception& e) {
        partial[s].failure = e.what();
      }
    }
  });
  lm::metrics::PanopticStats stats{std::vector<lm::metrics::ClassPanopticStats>(q)};
  lm::metrics::ConfusionMatrix cm(q, ignore);
  for (std::size_t s = 0; s < partial.size(); ++s) {
    if (!partial[s].failure.empty()) throw lm::Error(lm::ErrorKind::invalid_input, "cli", o.gt[s] + ": " + partial[s].failure);
    stats.merge(partial[s].stats);
    cm.merge(partial[s].cm);
  }
  const auto sem = lm::metrics::semantic_scores(cm);
  const auto scores = lm::metrics::panoptic_scores(stats, sem.iou, mask);
  const auto names = class_names(o, cfg, q);

  json per_class = json::array();
  for (std::size_t c = 0; c < q; ++c) {
    const auto& st = stats.per_class[c];
    json row{{"id", c}};
    if (names) row["name"] = (*names)[c];
    row["thing"] = static_cast<bool>(mask[c]);
    row["tp"] = st.tp;
    row["fp"] = st.fp;
    row["fn"] = st.fn;
    if (scores.per_class[c]) {
      row["pq"] = percent(scores.per_class[c]->pq);
      row["sq"] = percent(scores.per_class[c]->sq);
      row["rq"] = percent(scores.per_class[c]->rq);
    } else {
      row["pq"] = row["sq"] = row["rq"] = nullptr;
    }
    row["iou"] = percent_or_null(sem.iou[c]);
    per_class.push_back(row);
  }
  json report{{"scans", o.gt.size()},
              {"classes", q},
              {"ignore_id", ignore},
              {"all", aggregate_json(scores.all)},
              {"things", aggregate_json(scores.things)},
              {"stuff", aggregate_json(scores.stuff)},
              {"pq_dagger", percent_or_null(scores.pq_dagger)},
              {"miou", percent_or_null(sem.miou)},
              {"per_class", per_class}};
  write_output(o.out, dump(report));
  return 0;
}

// ------------------------------------------------------------ eval-robust

struct RobustOpts {
  std::string table, baseline, out;
};

// corruption,severity,miou rows (severity 1..3, miou a fraction) plus one
// clean,<miou> row.
lm::metrics::RobustnessTable read_robustness_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw lm::Error(lm::ErrorKind::invalid_input, "cli", "cannot open " + path);
  lm::metrics::RobustnessTable t;
  std::map<std::string, std::array<bool, lm::metrics::kSeverityLevels>> seen;
  bool have_clean = false;
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& msg) -> void {
    throw lm::Error(lm::ErrorKind::format, "cli", path + ":" + std::to_string(lineno) + ": " + msg);
  };
  auto number = [&](const std::string& s) {
    double v = 0.0;
    std::size_t used = 0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      fail("'" + s + "' is not a number");
    }
    if (used != s.size()) fail("'" + s + "' is not a number");
    return v;
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (lineno == 1) {
      if (f != std::vector<std::string>{"corruption", "severity", "miou"}) fail("header must be corruption,severity,miou");
      continue;
    }
    if (!f.empty() && f[0] == "clean") {
      if (f.size() != 2) fail("clean row must be clean,<miou>");
      if (have_clean) fail("duplicate clean row");
      t.clean = number(f[1]);
      have_clean = true;
      continue;
    }
    if (f.size() != 3) fail("expected corruption,severity,miou");
    const double sev = number(f[1]);
    if (sev != 1.0 && sev != 2.0 && sev != 3.0) fail("severity must be 1, 2 or 3");
    const auto l = static_cast<std::size_t>(sev) - 1;
    auto& flags = seen[f[0]];
    if (flags[l]) fail("duplicate entry for " + f[0] + " severity " + f[1]);
    flags[l] = true;
    t.corruption[f[0]][l] = number(f[2]);
  }
  if (lineno == 0) throw lm::Error(lm::ErrorKind::format, "cli", path + ": empty table");
  if (!have_clean) throw lm::Error(lm::ErrorKind::format, "cli", path + ": missing clean row");
  for (const auto& [name, flags] : seen) {
    for (bool b : flags) {
      if (!b) throw lm::Error(lm::ErrorKind::format, "cli", path + ": '" + name + "' lacks a severity level");
    }
  }
  return t;
}

int run_eval_robust(const Globals&, const RobustOpts& o) {
  const auto cand = read_robustness_csv(o.table);
  const auto base = read_robustness_csv(o.baseline);
  const auto r = lm::metrics::robustness_scores(cand, base);
  json per = json::array();
  for (const auto& [name, ce] : r.ce) per.push_back({{"corruption", name}, {"ce", percent(ce)}, {"rr", percent(r.rr.at(name))}});
  json report{{"corruptions", r.ce.size()},
              {"clean_miou", percent(cand.clean)},
              {"mce", percent(r.mce)},
              {"mrr", percent(r.mrr)},
              {"per_corruption", per}};
  write_output(o.out, dump(report));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lidarmerge: multi-dataset LiDAR projection, harmonization, loss and evaluation toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  app.footer(
      "Environment:\n"
      "  LIDARMERGE_CONFIG  tool config used when --config is not given\n"
      "Exit status: 0 success, 1 runtime error, 2 usage error, 3 failed gradient check.");

  Globals g;
  app.add_option("--config", g.config_path, "Tool config (TOML)")->envname("LIDARMERGE_CONFIG");
  app.add_option("--threads", g.threads, "Worker threads; outputs do not depend on it")->check(CLI::Range(1u, 256u));

  std::function<int()> action;

  ProjectOpts po;
  auto* project = app.add_subcommand("project", "Pair points with camera pixels; CSV point,camera,u,v,depth");
  project->add_option("--cloud", po.cloud, "Point cloud file")->required();
  project->add_option("--calib", po.calib, "Calibration file (intrinsic:/extrinsic:/size: blocks)")->required();
  project->add_option("--out", po.out, "Output CSV (default stdout)");
  project->add_option("--format", po.format, "auto, kitti, nuscenes or tensor")->capture_default_str();
  project->callback([&] { action = [&] { return run_project(g, po); }; });

  VoxelizeOpts vo;
  auto* voxelize = app.add_subcommand("voxelize", "Rasterize a cloud; CSV of non-empty cells in z, y, x order");
  voxelize->add_option("--cloud", vo.cloud, "Point cloud file")->required();
  voxelize->add_option("--voxel-size", vo.voxel_size, "One or three edge lengths in meters")->expected(1, 3);
  voxelize->add_option("--dataset", vo.dataset, "Use this dataset profile's voxel size and origin offset");
  voxelize->add_option("--out", vo.out, "Output CSV (default stdout)");
  voxelize->add_option("--downsample", vo.downsample, "Also write one point per voxel as a KITTI .bin");
  voxelize->add_option("--format", vo.format, "auto, kitti, nuscenes or tensor")->capture_default_str();
  voxelize->callback([&] { action = [&] { return run_voxelize(g, vo); }; });

  StatsOpts so;
  auto* stats = app.add_subcommand("stats", "Per-class planar-range histogram; CSV class,bin_lo,bin_hi,count");
  stats->add_option("--cloud", so.cloud, "Point cloud file")->required();
  stats->add_option("--labels", so.labels, ".label file or id tensor")->required();
  stats->add_option("--bin-width", so.bin_width, "Bin width in meters (default 0.5)");
  stats->add_option("--max-range", so.max_range, "Largest radius counted (default 50)");
  stats->add_option("--classes", so.classes, "Number of classes (default: largest label + 1)");
  stats->add_option("--ignore", so.ignore, "Label excluded from the histogram");
  stats->add_option("--out", so.out, "Output CSV (default stdout)");
  stats->add_option("--format", so.format, "auto, kitti, nuscenes or tensor")->capture_default_str();
  stats->callback([&] { action = [&] { return run_stats(g, so); }; });

  RemapOpts ro;
  auto* remap = app.add_subcommand("remap", "Rewrite dataset labels in the unified label space");
  remap->add_option("--space", ro.space, "Label-space file (default: from config)");
  remap->add_option("--dataset", ro.dataset, "Source dataset id")->required();
  remap->add_option("--labels", ro.labels, "Input .label file")->required();
  remap->add_option("--out", ro.out, "Output .label file, instance ids kept (default stdout)");
  remap->callback([&] { action = [&] { return run_remap(g, ro); }; });

  LossesOpts lo;
  auto* losses = app.add_subcommand("losses", "Evaluate a loss kernel on tensor files; JSON report");
  losses->add_option("--spec", lo.spec, "Loss spec (kind, tau, ...)")->required();
  losses->add_option("--inputs", lo.inputs, "Input tensors in the order the loss kind expects");
  losses->add_flag("--grad-check", lo.grad_check, "Compare gradients with central finite differences");
  losses->add_option("--grad-out", lo.grad_out, "Directory for gradient tensors");
  losses->add_option("--space", lo.space, "Label-space file for --dataset masks");
  losses->add_option("--dataset", lo.dataset, "Restrict negatives to this dataset's classes");
  losses->add_option("--normalize-embeddings", lo.normalize_embeddings, "true or false; overrides the spec and config");
  losses->add_option("--out", lo.out, "Output JSON (default stdout)");
  losses->callback([&] { action = [&] { return run_losses(g, lo); }; });

  ClusterOpts co;
  auto* cluster = app.add_subcommand("cluster", "Mean-shift instances from offsets; writes a packed .label");
  cluster->add_option("--coords", co.coords, "Point cloud file")->required();
  cluster->add_option("--offsets", co.offsets, "N x 3 offset tensor")->required();
  cluster->add_option("--semantic", co.semantic, "Unified semantic ids (.label or tensor)")->required();
  cluster->add_option("--out", co.out, "Output .label file (default stdout)");
  cluster->add_option("--bandwidth", co.bandwidth, "Mean-shift bandwidth in meters");
  cluster->add_option("--dataset", co.dataset, "Take the bandwidth from this dataset profile");
  cluster->add_option("--things", co.things, "Thing class ids (default: label-space thing mask)")->delimiter(',');
  cluster->add_option("--space", co.space, "Label-space file (default: from config)");
  cluster->add_option("--summary", co.summary, "Summary JSON (default stdout when --out is a file)");
  cluster->add_option("--format", co.format, "auto, kitti, nuscenes or tensor")->capture_default_str();
  cluster->callback([&] { action = [&] { return run_cluster(g, co); }; });

  EvalOpts so_sem;
  auto* eval_sem = app.add_subcommand("eval-sem", "mIoU / mAcc over paired label files; JSON report");
  EvalOpts so_pan;
  auto* eval_pan = app.add_subcommand("eval-pan", "PQ, PQ-dagger, SQ, RQ over paired panoptic label files");
  for (auto [sub, eo] : {std::pair{eval_sem, &so_sem}, std::pair{eval_pan, &so_pan}}) {
    sub->add_option("--gt", eo->gt, "Ground-truth label files")->required();
    sub->add_option("--pred", eo->pred, "Prediction label files, same order")->required();
    sub->add_option("--classes", eo->classes, "Class count (default: label-space size)");
    sub->add_option("--ignore", eo->ignore, "Ignore id (default: config, 255)");
    sub->add_option("--space", eo->space, "Label-space file for class names");
    sub->add_option("--out", eo->out, "Output JSON (default stdout)");
  }
  eval_pan->add_option("--things", so_pan.things, "Thing class ids (default: label-space thing mask)")->delimiter(',');
  eval_sem->callback([&] { action = [&] { return run_eval_sem(g, so_sem); }; });
  eval_pan->callback([&] { action = [&] { return run_eval_pan(g, so_pan); }; });

  RobustOpts rbo;
  auto* eval_robust = app.add_subcommand("eval-robust", "CE / RR per corruption and mCE / mRR; JSON report");
  eval_robust->add_option("--table", rbo.table, "Candidate CSV: corruption,severity,miou + clean,<miou>")->required();
  eval_robust->add_option("--baseline", rbo.baseline, "Baseline CSV, same layout")->required();
  eval_robust->add_option("--out", rbo.out, "Output JSON (default stdout)");
  eval_robust->callback([&] { action = [&] { return run_eval_robust(g, rbo); }; });

  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--config" || arg == "--threads") {
      ++i;
      continue;
    }
    if (arg.starts_with("-")) continue;
    if (!app.get_subcommand_no_throw(arg)) {
      std::cerr << "lidarmerge: unknown subcommand '" << arg << "'\nRun with --help for more information.\n";
      return kExitUsage;
    }
    break;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    return action();
  } catch (const lm::Error& e) {
    std::cerr << "lidarmerge: error: " << e.what() << "\n";
  } catch (const std::exception& e) {
    std::cerr << "lidarmerge: error: " << e.what() << "\n";
  }
  return kExitError;
}
