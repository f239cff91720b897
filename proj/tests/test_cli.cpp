#include "fixtures.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <set>

namespace lm = lidarmerge;
using json = nlohmann::json;
using lmtest::run_cli;

namespace {

class Cli : public ::testing::Test {
 protected:
  void SetUp() override { fx_ = lmtest::make_fixtures(dir_); }

  json run_json(const std::string& args, int expect_status = 0) {
    const auto r = run_cli(args);
    EXPECT_EQ(r.status, expect_status) << args;
    return r.status == 0 ? json::parse(r.out) : json();
  }

  lmtest::TempDir dir_{"cli"};
  lmtest::CliFixtures fx_;
};

}  // namespace

TEST_F(Cli, HelpAndUsageErrors) {
  const auto help = run_cli("--help");
  EXPECT_EQ(help.status, 0);
  for (const char* sub : {"project", "voxelize", "stats", "remap", "losses", "cluster", "eval-sem", "eval-pan",
                          "eval-robust"}) {
    EXPECT_NE(help.out.find(sub), std::string::npos) << sub;
  }
  EXPECT_NE(help.out.find("LIDARMERGE_CONFIG"), std::string::npos);
  EXPECT_EQ(run_cli("frobnicate").status, 2);
  EXPECT_EQ(run_cli("").status, 2);
  EXPECT_EQ(run_cli("project").status, 2);
  EXPECT_EQ(run_cli("stats --cloud x --labels y --bin-width abc").status, 2);
  EXPECT_EQ(run_cli("--threads 0 eval-robust --table a --baseline b").status, 2);
}

TEST_F(Cli, RuntimeErrorsAreNonzero) {
  EXPECT_EQ(run_cli("project --cloud /nonexistent.bin --calib " + fx_.calib).status, 1);
  lmtest::spit(dir_.file("bad.bin"), std::string(17, '\0'));
  EXPECT_EQ(run_cli("voxelize --cloud " + dir_.file("bad.bin") + " --voxel-size 0.1").status, 1);
  EXPECT_EQ(run_cli("voxelize --cloud " + fx_.scan).status, 1);
  EXPECT_EQ(run_cli("cluster --coords " + fx_.blob_coords + " --offsets " + fx_.blob_offsets + " --semantic " +
                    fx_.blob_semantic + " --things 0 --out " + dir_.file("x.label"))
                .status,
            1);
  EXPECT_EQ(run_cli("--config " + dir_.file("missing.toml") + " remap --dataset a --labels x --out y").status, 1);
}

TEST_F(Cli, ProjectCsv) {
  const auto r = run_cli("project --cloud " + fx_.scan + " --calib " + fx_.calib);
  ASSERT_EQ(r.status, 0);
  std::stringstream ss(r.out);
  std::string line;
  std::getline(ss, line);
  EXPECT_EQ(line, "point,camera,u,v,depth");
  const auto cams = lm::geometry::parse_calibration(lmtest::slurp(fx_.calib));
  const auto pairs = lm::geometry::pair_points_pixels(lm::io::read_kitti_bin(fx_.scan), cams);
  std::size_t rows = 0;
  std::set<int> cams_seen;
  while (std::getline(ss, line)) {
    ++rows;
    cams_seen.insert(line[line.find(',') + 1] - '0');
  }
  EXPECT_EQ(rows, pairs.size());
  EXPECT_GT(rows, 0u);
  EXPECT_EQ(cams_seen, (std::set<int>{0, 1}));
}

TEST_F(Cli, VoxelizeCountsEveryPoint) {
  const auto r = run_cli("voxelize --cloud " + fx_.scan + " --voxel-size 2.0 --downsample " + dir_.file("d.bin"));
  ASSERT_EQ(r.status, 0);
  std::stringstream ss(r.out);
  std::string line;
  std::getline(ss, line);
  EXPECT_EQ(line, "cell_x,cell_y,cell_z,count,first_point");
  std::size_t total = 0, cells = 0;
  while (std::getline(ss, line)) {
    std::stringstream row(line);
    std::string cell;
    for (int k = 0; k < 4; ++k) std::getline(row, cell, ',');
    total += std::stoul(cell);
    ++cells;
  }
  EXPECT_EQ(total, 4000u);
  EXPECT_EQ(lm::io::read_kitti_bin(dir_.file("d.bin")).size(), cells);
}

TEST_F(Cli, StatsCoversAllClassesAndBins) {
  const auto r = run_cli("stats --cloud " + fx_.scan + " --labels " + fx_.labels + " --classes 19 --ignore 255");
  ASSERT_EQ(r.status, 0);
  EXPECT_EQ(static_cast<std::size_t>(std::count(r.out.begin(), r.out.end(), '\n')), 1u + 19u * 100u);
  EXPECT_EQ(r.out.substr(0, r.out.find('\n')), "class,bin_lo,bin_hi,count");
}

TEST_F(Cli, RemapKeepsInstances) {
  ASSERT_EQ(run_cli("--config " + lmtest::shipped_config() + " remap --dataset semantickitti --labels " + fx_.pan_gt +
                    " --out " + dir_.file("u.label"))
                .status,
            0);
  const auto in = lm::io::read_kitti_label(fx_.pan_gt);
  const auto out = lm::io::read_kitti_label(dir_.file("u.label"));
  EXPECT_EQ(out.instance, in.instance);
  const auto space = lm::config::load_label_space(lmtest::shipped_space());
  EXPECT_EQ(out.semantic, lm::labelspace::remap_labels(in.semantic, space.space, "semantickitti"));
}

TEST_F(Cli, LabelsCanGoToStdout) {
  const std::string cfg = "--config " + lmtest::shipped_config();
  const auto r = run_cli(cfg + " remap --dataset semantickitti --labels " + fx_.pan_gt);
  ASSERT_EQ(r.status, 0);
  ASSERT_EQ(run_cli(cfg + " remap --dataset semantickitti --labels " + fx_.pan_gt + " --out " + dir_.file("f.label")).status,
            0);
  EXPECT_EQ(r.out, lmtest::slurp(dir_.file("f.label")));

  const std::string cluster = "cluster --coords " + fx_.blob_coords + " --offsets " + fx_.blob_offsets +
                              " --semantic " + fx_.blob_semantic + " --bandwidth 1.2 --things 0";
  const auto c = run_cli(cluster);
  ASSERT_EQ(c.status, 0);
  EXPECT_EQ(c.out.size(), 200u * 4u);
  ASSERT_EQ(run_cli(cluster + " --out " + dir_.file("c.label")).status, 0);
  EXPECT_EQ(c.out, lmtest::slurp(dir_.file("c.label")));
}

TEST_F(Cli, EnvironmentSuppliesConfig) {
  const std::string args = "remap --dataset semantickitti --labels " + fx_.pan_gt + " --out " + dir_.file("e.label");
  EXPECT_EQ(run_cli(args).status, 1);
  ::setenv("LIDARMERGE_CONFIG", lmtest::shipped_config().c_str(), 1);
  const int status = run_cli(args).status;
  ::unsetenv("LIDARMERGE_CONFIG");
  EXPECT_EQ(status, 0);
  EXPECT_EQ(lm::io::read_kitti_label(dir_.file("e.label")).semantic.size(), 4000u);
}

TEST_F(Cli, LossesReportAndGradCheck) {
  const auto j = run_json("losses --spec " + fx_.loss_spec + " --inputs " + fx_.cos_a + " " + fx_.cos_b + " --grad-check");
  EXPECT_EQ(j["kind"], "cosine");
  const auto a = lm::io::read_matrix(fx_.cos_a), b = lm::io::read_matrix(fx_.cos_b);
  EXPECT_NEAR(j["value"].get<double>(), lm::losses::cosine_alignment_loss(a, b).value, 1e-12);
  EXPECT_TRUE(j["grad_check"]["passed"].get<bool>());
  EXPECT_LT(j["grad_check"]["max_relative_error"].get<double>(), 1e-4);

  lmtest::spit(dir_.file("ce.toml"), "kind = \"cross_entropy\"\nignore_id = 255\n");
  const auto ce = run_json("losses --spec " + dir_.file("ce.toml") + " --inputs " + fx_.ce_logits + " " + fx_.ce_targets +
                           " --grad-check");
  EXPECT_TRUE(ce["grad_check"]["passed"].get<bool>());

  lmtest::spit(dir_.file("obj.toml"), "kind = \"objective\"\n[parts]\nv2p = 1\nlabel = 2\nce = 3\nlovasz = 4\nl1 = 5\n");
  EXPECT_EQ(run_json("losses --spec " + dir_.file("obj.toml"))["value"].get<double>(), 15.0);

  lmtest::spit(dir_.file("bad.toml"), "kind = \"hinge\"\n");
  EXPECT_EQ(run_cli("losses --spec " + dir_.file("bad.toml")).status, 1);
  lmtest::spit(dir_.file("tight.toml"), "kind = \"cosine\"\ntolerance = 1e-30\n");
  EXPECT_EQ(run_cli("losses --spec " + dir_.file("tight.toml") + " --inputs " + fx_.cos_a + " " + fx_.cos_b +
                    " --grad-check")
                .status,
            3);
}

TEST_F(Cli, ContrastiveNormalizationSwitch) {
  lmtest::Rng rng(9);
  const auto items = rng.matrix(10, 4), text = rng.matrix(3, 4);
  const auto classes = rng.labels(10, 3);
  const std::string inputs = lmtest::write_tensor(dir_.file("items.lmtf"), items) + " " +
                             lmtest::write_tensor(dir_.file("text.lmtf"), text) + " " +
                             lmtest::write_ids(dir_.file("classes.lmtf"), classes);
  lmtest::spit(dir_.file("tc.toml"), "kind = \"text_contrastive\"\ntau = 0.5\n");
  const auto items_f = lm::io::read_matrix(dir_.file("items.lmtf")), text_f = lm::io::read_matrix(dir_.file("text.lmtf"));
  for (bool norm : {true, false}) {
    const auto j = run_json("losses --spec " + dir_.file("tc.toml") + " --inputs " + inputs +
                            " --grad-check --normalize-embeddings " + (norm ? "true" : "false"));
    lm::losses::ContrastiveOptions opts;
    opts.tau = 0.5;
    opts.normalize_embeddings = norm;
    EXPECT_NEAR(j["value"].get<double>(),
                lm::losses::text_contrastive_loss(items_f, text_f, classes, std::vector<bool>(3, true), opts).value, 1e-12);
    EXPECT_TRUE(j["grad_check"]["passed"].get<bool>());
  }
}

TEST_F(Cli, ClusterTwoBlobs) {
  const auto j = run_json("cluster --coords " + fx_.blob_coords + " --offsets " + fx_.blob_offsets + " --semantic " +
                          fx_.blob_semantic + " --bandwidth 1.2 --things 0 --out " + dir_.file("i.label"));
  EXPECT_EQ(j["instances"], 2);
  const auto l = lm::io::read_kitti_label(dir_.file("i.label"));
  std::vector<std::size_t> truth(200);
  for (std::size_t i = 100; i < 200; ++i) truth[i] = 1;
  EXPECT_TRUE(lmtest::same_partition(l.instance, truth));

  const auto k = run_json("--config " + lmtest::shipped_config() + " cluster --coords " + fx_.blob_coords +
                          " --offsets " + fx_.blob_offsets + " --semantic " + fx_.blob_semantic +
                          " --dataset semantickitti --things 0 --out " + dir_.file("k.label"));
  EXPECT_EQ(k["bandwidth"], 1.2);
  EXPECT_EQ(k["instances"], 2);
}

TEST_F(Cli, EvalSemIdenticalIsPerfect) {
  const auto j = run_json("eval-sem --gt " + fx_.labels + " --pred " + fx_.labels + " --classes 19");
  EXPECT_EQ(j["miou"].get<double>(), 100.0);
  EXPECT_EQ(j["macc"].get<double>(), 100.0);
  EXPECT_EQ(run_cli("eval-sem --gt " + fx_.labels + " --pred " + fx_.labels + " " + fx_.labels + " --classes 19").status,
            1);
}

TEST_F(Cli, EvalSemMatchesLibrary) {
  const auto j = run_json("eval-sem --gt " + fx_.labels + " --pred " + fx_.pred_labels + " --classes 19");
  const auto gt = lm::io::read_kitti_label(fx_.labels), pr = lm::io::read_kitti_label(fx_.pred_labels);
  const auto s = lm::metrics::semantic_scores(lm::metrics::accumulate_confusion(gt.semantic, pr.semantic, 19));
  EXPECT_NEAR(j["miou"].get<double>(), *s.miou * 100.0, 5e-5);
  EXPECT_EQ(j["scans"], 1);
}

TEST_F(Cli, EvalPanIdenticalIsPerfect) {
  const auto j = run_json("eval-pan --gt " + fx_.pan_gt + " --pred " + fx_.pan_gt + " --classes 19 --things 0,1,2,3,4,5,6,7");
  EXPECT_EQ(j["all"]["pq"].get<double>(), 100.0);
  EXPECT_EQ(j["pq_dagger"].get<double>(), 100.0);
}

TEST_F(Cli, EvalRobust) {
  const auto self = run_json("eval-robust --table " + fx_.robust_cand + " --baseline " + fx_.robust_cand);
  EXPECT_EQ(self["mce"].get<double>(), 100.0);
  EXPECT_EQ(self["corruptions"], 8);
  lmtest::spit(dir_.file("short.csv"), "corruption,severity,miou\nclean,0.7\nfog,1,0.5\nfog,2,0.4\n");
  EXPECT_EQ(run_cli("eval-robust --table " + dir_.file("short.csv") + " --baseline " + fx_.robust_base).status, 1);
}

TEST_F(Cli, OutputsDeterministicAcrossRunsAndThreads) {
  for (const auto& p : lmtest::pipelines(fx_, dir_)) {
    std::vector<std::string> first;
    for (const char* threads : {"1", "4", "1", "4"}) {
      ASSERT_EQ(run_cli(std::string("--threads ") + threads + " " + p.args).status, 0) << p.name;
      std::vector<std::string> now;
      for (const auto& o : p.outputs) now.push_back(lmtest::slurp(o));
      if (first.empty()) {
        first = now;
        for (const auto& bytes : now) EXPECT_FALSE(bytes.empty()) << p.name;
      } else {
        EXPECT_EQ(now, first) << p.name;
      }
    }
  }
}
