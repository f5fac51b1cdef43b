#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "helpers.hpp"
#include "mosguard/defense.hpp"
#include "mosguard/human_study.hpp"

using namespace mosguard;
namespace ts = testing_support;

namespace {

const PredictorModel& teacher() {
  static const PredictorModel m = PredictorModel::initialize(3);
  return m;
}

std::vector<NamedClip> clips(std::size_t n, std::size_t len = 1024) {
  std::vector<NamedClip> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back({"c" + std::to_string(i), ts::random_clip(len, 100 + i)});
  return out;
}

AdversarialResult fake_attack(std::size_t len, std::uint64_t seed, double amplitude = 0.03) {
  AdversarialResult r;
  r.perturbation = {ts::random_samples(len, seed, 2.0), amplitude};
  return r;
}

std::vector<PerturbedClip> perturbed(std::size_t n, double scale) {
  std::vector<PerturbedClip> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto delta = ts::random_samples(1024, 500 + i, scale);
    out.push_back({"p" + std::to_string(i), ts::random_clip(1024, 300 + i), std::move(delta)});
  }
  return out;
}

std::string study_csv(const std::vector<std::string>& rows, const std::string& header) {
  std::string text = header + "\n";
  for (const auto& r : rows) text += r + "\n";
  return text;
}

}  // namespace

TEST(BuildLabeled, TeacherLabelsAndExternalOverride) {
  const auto cs = clips(4);
  const auto d = build_labeled(cs, teacher());
  ASSERT_EQ(d.entries.size(), 4u);
  for (std::size_t i = 0; i < cs.size(); ++i) EXPECT_EQ(d.entries[i].label, teacher().predict(cs[i].audio));
  const auto again = build_labeled(cs, teacher(), {}, 3);
  for (std::size_t i = 0; i < cs.size(); ++i) EXPECT_EQ(again.entries[i].label, d.entries[i].label);
  const auto ext = build_labeled(cs, teacher(), {{"c2", QualityScore{1, 2, 3}}});
  EXPECT_EQ(ext.entries[2].label, (QualityScore{1, 2, 3}));
  EXPECT_EQ(ext.entries[1].label, d.entries[1].label);
}

TEST(BuildLabeled, FailuresAreRecorded) {
  auto cs = clips(2);
  cs.push_back({"short", Waveform(std::vector<double>(100, 0.5), 16000)});
  const auto d = build_labeled(cs, teacher());
  EXPECT_EQ(d.entries.size(), 2u);
  ASSERT_EQ(d.failures.size(), 1u);
  EXPECT_EQ(d.failures[0].rfind("short", 0), 0u);
}

TEST(AdversarialSet, CarriesSourceLabels) {
  const auto d = build_labeled(clips(3), teacher());
  AttackConfig cfg;
  cfg.max_iters = 3;
  cfg.learning_rate = 0.05;
  const auto ad = build_adversarial_set(d, teacher(), cfg);
  ASSERT_EQ(ad.entries.size(), d.entries.size());
  for (const auto& e : ad.entries) {
    EXPECT_EQ(e.label, d.entries[e.source].label);
    EXPECT_EQ(e.clip_id, d.entries[e.source].clip_id);
    EXPECT_NE(e.label, e.attack.y_target);
    for (std::size_t t = 0; t < e.audio.size(); ++t) {
      EXPECT_EQ(e.audio[t], d.entries[e.source].audio[t] + e.delta[t]);
    }
  }
}

TEST(AdvTrain, ZeroLearningRateReturnsTeacher) {
  const auto d = build_labeled(clips(4), teacher());
  AdversarialSet ad;
  for (std::size_t i = 0; i < 4; ++i) ad.entries.push_back(make_adversarial_entry(d, i, fake_attack(1024, i)));
  AdvTrainConfig cfg;
  cfg.epochs = 2;
  cfg.learning_rate = 0.0;
  cfg.batch_size = 3;
  const auto r = adv_train(teacher(), d, ad, cfg);
  EXPECT_EQ(r.model, teacher());
  ASSERT_EQ(r.log.size(), 3u);
  EXPECT_EQ(r.log.front().forgetting_loss, 0.0);
  EXPECT_GT(r.log.front().adversarial_loss, 0.0);
}

TEST(AdvTrain, EmptyAdversarialSetStartsAtZeroLoss) {
  const auto d = build_labeled(clips(4), teacher());
  AdvTrainConfig cfg;
  cfg.epochs = 3;
  const auto r = adv_train(teacher(), d, {}, cfg);
  EXPECT_EQ(r.log.front().forgetting_loss, 0.0);
  EXPECT_EQ(r.log.front().adversarial_loss, 0.0);
  EXPECT_EQ(r.step_losses.front(), 0.0);
  const auto x = ts::random_clip(1024, 77);
  EXPECT_EQ(r.model.predict(x), teacher().predict(x));
}

TEST(AdvTrain, ReducesAdversarialLossWithoutTouchingTeacher) {
  const auto d = build_labeled(clips(4), teacher());
  AdversarialSet ad;
  for (std::size_t i = 0; i < 4; ++i) ad.entries.push_back(make_adversarial_entry(d, i, fake_attack(1024, 20 + i, 0.5)));
  const auto before = teacher();
  AdvTrainConfig cfg;
  cfg.epochs = 30;
  cfg.learning_rate = 1e-4;
  cfg.batch_size = 8;
  const auto r = adv_train(teacher(), d, ad, cfg);
  EXPECT_EQ(teacher(), before);
  EXPECT_LT(r.log.back().adversarial_loss, r.log.front().adversarial_loss);
}

TEST(AdvTrain, ContractViolations) {
  const auto d = build_labeled(clips(2), teacher());
  AdversarialSet ad;
  ad.entries.push_back(make_adversarial_entry(d, 0, fake_attack(1024, 1)));
  ad.entries[0].label = QualityScore{1, 1, 1};
  EXPECT_THROW(adv_train(teacher(), d, ad, {}), contract_error);
  ad.entries[0] = make_adversarial_entry(d, 0, fake_attack(1024, 1));
  ad.entries[0].source = 1;
  EXPECT_THROW(adv_train(teacher(), d, ad, {}), contract_error);
  EXPECT_THROW(adv_train(teacher(), {}, {}, {}), data_error);
}

TEST(RobustnessMetrics, IdentityModelGivesEqualErrors) {
  const auto test = perturbed(6, 0.03);
  const auto r = compute_errors(teacher(), teacher(), test);
  EXPECT_EQ(r.n, 6u);
  for (const auto& s : r.per_subscore) {
    EXPECT_EQ(s.e_g, s.e_f);
    EXPECT_EQ(s.f_g, 0.0);
    EXPECT_EQ(s.pass_count, 0u);
  }
}

TEST(RobustnessMetrics, ZeroPerturbationFailsStrictCriterion) {
  auto test = perturbed(4, 0.0);
  const auto g = PredictorModel::initialize(4);
  const auto r = compute_errors(teacher(), g, test);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_EQ(r.per_subscore[j].e_f, 0.0);
    EXPECT_EQ(r.pass_rate(j), 0.0);
    EXPECT_EQ(r.per_subscore[j].e_g, r.per_subscore[j].f_g);
  }
}

TEST(RobustnessMetrics, IndependentRecomputation) {
  const auto test = perturbed(5, 0.03);
  const auto g = PredictorModel::initialize(9);
  const auto r = compute_errors(teacher(), g, test, 2);
  for (std::size_t j = 0; j < 3; ++j) {
    double ef = 0, eg = 0, fg = 0;
    std::size_t pass = 0;
    for (const auto& c : test) {
      std::vector<double> adv(c.audio.size());
      for (std::size_t t = 0; t < adv.size(); ++t) adv[t] = c.audio[t] + c.delta[t];
      const Waveform xa(adv, 16000);
      const double f0 = teacher().predict(c.audio)[j], f1 = teacher().predict(xa)[j];
      const double g0 = g.predict(c.audio)[j], g1 = g.predict(xa)[j];
      ef += std::abs(f1 - f0);
      eg += std::abs(g1 - f0);
      fg += std::abs(g0 - f0);
      pass += std::abs(g1 - f0) < std::abs(f1 - f0) ? 1 : 0;
    }
    EXPECT_NEAR(r.per_subscore[j].e_f, ef / 5, 1e-12);
    EXPECT_NEAR(r.per_subscore[j].e_g, eg / 5, 1e-12);
    EXPECT_NEAR(r.per_subscore[j].f_g, fg / 5, 1e-12);
    EXPECT_EQ(r.per_subscore[j].pass_count, pass);
  }
}

TEST(RobustnessMetrics, PermutationAndDuplicationInvariance) {
  auto test = perturbed(5, 0.03);
  const auto g = PredictorModel::initialize(9);
  const auto base = compute_errors(teacher(), g, test);
  std::reverse(test.begin(), test.end());
  const auto rev = compute_errors(teacher(), g, test);
  auto doubled = test;
  doubled.insert(doubled.end(), test.begin(), test.end());
  const auto dup = compute_errors(teacher(), g, doubled);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_NEAR(rev.per_subscore[j].e_f, base.per_subscore[j].e_f, 1e-12);
    EXPECT_NEAR(rev.per_subscore[j].e_g, base.per_subscore[j].e_g, 1e-12);
    EXPECT_NEAR(dup.per_subscore[j].f_g, base.per_subscore[j].f_g, 1e-12);
    EXPECT_NEAR(dup.per_subscore[j].e_g, base.per_subscore[j].e_g, 1e-12);
    EXPECT_EQ(dup.per_subscore[j].pass_count, 2 * base.per_subscore[j].pass_count);
    EXPECT_EQ(dup.pass_rate(j), base.pass_rate(j));
  }
}

TEST(RobustnessMetrics, ReportFormats) {
  const auto r = compute_errors(teacher(), PredictorModel::initialize(9), perturbed(3, 0.03));
  const auto csv = report_csv(r);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "subscore,E_f,E_g,F_g,pass_rate");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  const auto j = to_json(r);
  EXPECT_EQ(j.at("n").get<std::size_t>(), 3u);
  EXPECT_TRUE(j.at("subscores").contains("BAK"));
  EXPECT_THROW(compute_errors(teacher(), teacher(), {}), data_error);
}

TEST(HumanStudy, ZScoreExamples) {
  EXPECT_EQ(human_zscore(15, 30), 0.0);
  EXPECT_NEAR(human_zscore(17, 30), 0.7303, 5e-5);
  EXPECT_NEAR(human_zscore(8, 30), -2.556, 5e-4);
  EXPECT_NEAR(human_zscore(17, 30), 2.0 * (17 - 15) / std::sqrt(30.0), 1e-15);
  for (long n = 2; n <= 60; n += 2) EXPECT_EQ(human_zscore(n / 2, n), 0.0);
  EXPECT_THROW(human_zscore(31, 30), domain_error);
  EXPECT_THROW(human_zscore(1, 0), domain_error);
}

TEST(HumanStudy, OneTailedP) {
  EXPECT_EQ(one_tailed_p(0.0), 0.5);
  EXPECT_NEAR(one_tailed_p(0.7303), 0.2327, 1e-4);
  EXPECT_NEAR(one_tailed_p(-0.7303), 0.7673, 1e-4);
  EXPECT_NEAR(one_tailed_p(1.6448536269514722), 0.05, 1e-6);
  EXPECT_NEAR(one_tailed_p(0.3) + one_tailed_p(-0.3), 1.0, 1e-15);
  for (double z = -6.0; z < 6.0; z += 0.01) EXPECT_GT(one_tailed_p(z), one_tailed_p(z + 0.01));
}

TEST(HumanStudy, BelievingIdenticalFraction) {
  std::vector<std::string> rows;
  for (int i = 0; i < 35; ++i) rows.push_back("p" + std::to_string(i) + (i < 10 ? ",B" : ",A"));
  const auto s = study_summary(parse_human_study_csv(study_csv(rows, "participant,q1:adversarial")));
  ASSERT_EQ(s.pairs.size(), 1u);
  EXPECT_EQ(s.pairs[0].b_count, 10);
  EXPECT_NEAR(s.pairs[0].believing_identical, 0.7143, 5e-5);
  EXPECT_EQ(s.b_count_histogram.at(10), 1);
}

TEST(HumanStudy, AllATableCountsIdenticalPairs) {
  std::vector<std::string> rows;
  for (int i = 0; i < 5; ++i) rows.push_back("p" + std::to_string(i) + ",A,A,A,A");
  const auto s = study_summary(
      parse_human_study_csv(study_csv(rows, "participant,a:identical,b:adversarial,c:identical,d:adversarial")));
  for (const auto& p : s.participants) EXPECT_EQ(p.correct, 2);
  EXPECT_EQ(s.correct_histogram.at(2), 5);
}

TEST(HumanStudy, MalformedTables) {
  EXPECT_THROW(parse_human_study_csv(study_csv({"p0,A,B", "p1,A"}, "participant,a:identical,b:adversarial")),
               format_error);
  EXPECT_THROW(parse_human_study_csv(study_csv({"p0,A,C"}, "participant,a:identical,b:adversarial")), parse_error);
  EXPECT_THROW(parse_human_study_csv(study_csv({"p0,A"}, "participant,a:maybe")), parse_error);
  EXPECT_THROW(parse_human_study_csv(""), parse_error);
}

TEST(HumanStudy, ExampleTable) {
  const auto t = read_human_study_csv(std::filesystem::path(MOSGUARD_DATA_DIR) / "human_study_example.csv");
  EXPECT_EQ(t.participant_count(), 35u);
  EXPECT_EQ(t.pair_count(), 30u);
  const auto s = study_summary(t);
  long lo = 30, hi = 0;
  for (const auto& p : s.participants) {
    lo = std::min(lo, p.correct);
    hi = std::max(hi, p.correct);
    EXPECT_LE(p.z, 0.7303 + 5e-5);
  }
  EXPECT_EQ(lo, 8);
  EXPECT_EQ(hi, 17);
  EXPECT_NEAR(s.max_z, 0.7303, 5e-5);
  EXPECT_NEAR(s.min_p, 0.2327, 1e-4);
  double lowest = 1.0;
  for (const auto& p : s.pairs) lowest = std::min(lowest, p.believing_identical);
  EXPECT_NEAR(lowest, 25.0 / 35.0, 1e-15);
}
