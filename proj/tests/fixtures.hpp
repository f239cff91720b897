#pragma once

// On-disk inputs for every CLI subcommand, and the pipelines that read them.

#include "test_util.hpp"

namespace lmtest {

struct Pipeline {
  std::string name;
  std::string args;                  // without --threads
  std::vector<std::string> outputs;  // files compared byte for byte
};

struct CliFixtures {
  std::string scan, calib, labels, pred_labels, pan_gt, pan_pred;
  std::string blob_coords, blob_offsets, blob_semantic;
  std::string loss_spec, cos_a, cos_b, ce_logits, ce_targets;
  std::string robust_cand, robust_base;
};

inline std::string write_tensor(const std::string& path, const lm::FeatureMatrix& m) {
  lm::io::write_matrix(m, path);
  return path;
}

inline std::string write_ids(const std::string& path, const std::vector<lm::ClassId>& ids) {
  lm::io::Tensor t;
  t.shape = {ids.size()};
  for (auto v : ids) t.data.push_back(static_cast<float>(v));
  lm::io::write_tensor_file(t, path);
  return path;
}

inline CliFixtures make_fixtures(const TempDir& dir, std::uint64_t seed = 7) {
  Rng rng(seed);
  CliFixtures f;

  lm::PointCloud scan;
  scan.intensity.emplace();
  for (int i = 0; i < 4000; ++i) {
    scan.coords.push_back({rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(-30, 30)});
    scan.intensity->push_back(static_cast<float>(rng.uniform()));
  }
  f.scan = dir.file("scan.bin");
  lm::io::write_kitti_bin(scan, f.scan);

  f.calib = dir.file("calib.txt");
  spit(f.calib,
       "# front camera\n"
       "intrinsic: 500 0 320 0\n 0 500 240 0\n 0 0 1 0\n"
       "extrinsic: 1 0 0 0 0 1 0 0 0 0 1 0 0 0 0 1\n"
       "size: 640 480\n"
       "# rear camera\n"
       "intrinsic: 400 0 200 0 0 400 150 0 0 0 1 0\n"
       "extrinsic: -1 0 0 0 0 1 0 0 0 0 -1 0.5 0 0 0 1\n"
       "size: 400 300\n");

  std::vector<lm::ClassId> sem(scan.size()), pred(scan.size());
  std::vector<lm::InstanceId> inst(scan.size()), pinst(scan.size());
  for (std::size_t i = 0; i < scan.size(); ++i) {
    sem[i] = static_cast<lm::ClassId>(rng.index(19));
    pred[i] = rng.coin(0.7) ? sem[i] : static_cast<lm::ClassId>(rng.index(19));
    inst[i] = sem[i] < 8 ? static_cast<lm::InstanceId>(1 + rng.index(5)) : 0;
    pinst[i] = pred[i] < 8 ? (rng.coin(0.8) && sem[i] == pred[i] ? inst[i] : static_cast<lm::InstanceId>(1 + rng.index(5)))
                           : 0;
  }
  for (std::size_t i = 0; i < scan.size(); i += 50) sem[i] = 255;
  f.labels = dir.file("gt.label");
  lm::io::write_kitti_label(f.labels, sem, {});
  f.pred_labels = dir.file("pred.label");
  lm::io::write_kitti_label(f.pred_labels, pred, {});
  f.pan_gt = dir.file("pan_gt.label");
  lm::io::write_kitti_label(f.pan_gt, sem, inst);
  f.pan_pred = dir.file("pan_pred.label");
  lm::io::write_kitti_label(f.pan_pred, pred, pinst);

  const auto blobs = lmtest::blobs(rng, {{0, 0, 0}, {10, 0, 0}}, 100, 0.2);
  lm::PointCloud bc;
  bc.coords = blobs.coords;
  f.blob_coords = dir.file("blobs.bin");
  lm::io::write_kitti_bin(bc, f.blob_coords);
  f.blob_offsets = write_tensor(dir.file("offsets.lmtf"), lm::FeatureMatrix::Zero(200, 3));
  f.blob_semantic = write_ids(dir.file("blob_sem.lmtf"), std::vector<lm::ClassId>(200, 0));

  f.cos_a = write_tensor(dir.file("cos_a.lmtf"), rng.matrix(16, 8));
  f.cos_b = write_tensor(dir.file("cos_b.lmtf"), rng.matrix(16, 8));
  f.loss_spec = dir.file("cosine.toml");
  spit(f.loss_spec, "kind = \"cosine\"\n");
  f.ce_logits = write_tensor(dir.file("logits.lmtf"), rng.matrix(12, 5, -2, 2));
  f.ce_targets = write_ids(dir.file("targets.lmtf"), rng.labels(12, 5));

  f.robust_cand = dir.file("cand.csv");
  f.robust_base = dir.file("base.csv");
  std::string cand = "corruption,severity,miou\nclean,0.75\n", base = "corruption,severity,miou\nclean,0.7\n";
  for (const char* c : {"fog", "wet_ground", "snow", "motion_blur", "beam_missing", "crosstalk", "incomplete_echo",
                        "cross_sensor"}) {
    for (int l = 1; l <= 3; ++l) {
      cand += std::string(c) + "," + std::to_string(l) + "," + std::to_string(0.7 - 0.05 * l) + "\n";
      base += std::string(c) + "," + std::to_string(l) + "," + std::to_string(0.6 - 0.08 * l) + "\n";
    }
  }
  spit(f.robust_cand, cand);
  spit(f.robust_base, base);
  return f;
}

/// One pipeline per subcommand, each writing its results under `dir`.
inline std::vector<Pipeline> pipelines(const CliFixtures& f, const TempDir& dir) {
  const std::string cfg = "--config " + shipped_config() + " ";
  auto out = [&](const std::string& n) { return dir.file(n); };
  return {
      {"project", "project --cloud " + f.scan + " --calib " + f.calib + " --out " + out("project.csv"),
       {out("project.csv")}},
      {"voxelize",
       cfg + "voxelize --cloud " + f.scan + " --dataset nuscenes --out " + out("voxels.csv") + " --downsample " +
           out("down.bin"),
       {out("voxels.csv"), out("down.bin")}},
      {"stats", "stats --cloud " + f.scan + " --labels " + f.labels + " --classes 19 --ignore 255 --out " + out("hist.csv"),
       {out("hist.csv")}},
      {"remap", cfg + "remap --dataset semantickitti --labels " + f.pan_gt + " --out " + out("remapped.label"),
       {out("remapped.label")}},
      {"losses",
       "losses --spec " + f.loss_spec + " --inputs " + f.cos_a + " " + f.cos_b + " --grad-check --grad-out " +
           out("grads") + " --out " + out("losses.json"),
       {out("losses.json"), out("grads/grad_0.lmtf"), out("grads/grad_1.lmtf")}},
      {"cluster",
       "cluster --coords " + f.blob_coords + " --offsets " + f.blob_offsets + " --semantic " + f.blob_semantic +
           " --bandwidth 1.2 --things 0 --out " + out("inst.label") + " --summary " + out("cluster.json"),
       {out("inst.label"), out("cluster.json")}},
      {"eval-sem",
       "eval-sem --gt " + f.labels + " " + f.labels + " --pred " + f.pred_labels + " " + f.labels +
           " --classes 19 --out " + out("sem.json"),
       {out("sem.json")}},
      {"eval-pan",
       "eval-pan --gt " + f.pan_gt + " --pred " + f.pan_pred + " --classes 19 --things 0,1,2,3,4,5,6,7 --out " +
           out("pan.json"),
       {out("pan.json")}},
      {"eval-robust", "eval-robust --table " + f.robust_cand + " --baseline " + f.robust_base + " --out " + out("robust.json"),
       {out("robust.json")}},
  };
}

}  // namespace lmtest
