#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <vector>

#include "asrl/distill.hpp"
#include "asrl/gradcheck.hpp"
#include "asrl/harness.hpp"

using namespace asrl;

namespace {

std::vector<ImageTensor> game_obs(int n, std::uint64_t seed, int background = 0) {
  std::vector<ImageTensor> out;
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    auto s = make_level(GameSpec::gem_maze(), rng.range(0, 200), background);
    reset(s);
    for (int k = rng.range(0, 6); k > 0 && !s.done; --k) step(s, rng.range(0, 5));
    out.push_back(render(s));
  }
  return out;
}

std::vector<ImageTensor> noise_obs(int n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<ImageTensor> out(n);
  for (auto& img : out)
    for (auto& v : img.data) v = static_cast<float>(rng.uniform());
  return out;
}

}  // namespace

TEST(Snapshot, ZeroParamsGiveUniformTargets) {
  const ParamSet<float> zero(5);
  const auto buf = snapshot_targets(zero, noise_obs(4, 1));
  ASSERT_EQ(buf.size(), 4u);
  for (const auto& t : buf.targets) {
    for (double p : t.teacher_probs) EXPECT_NEAR(p, 0.2, 1e-12);
    EXPECT_EQ(t.teacher_value, 0.0);
  }
}

TEST(Snapshot, IsAFrozenCopy) {
  auto p = init_params<float>(5, 2);
  const auto obs = noise_obs(3, 3);
  const auto buf = snapshot_targets(p, obs);
  const auto copy = buf;
  p.fill(0.5f);
  EXPECT_EQ(buf.targets[0].teacher_probs, copy.targets[0].teacher_probs);
  EXPECT_EQ(buf.targets[0].obs, obs[0]);
  EXPECT_EQ(buf.size(), obs.size());
}

TEST(Snapshot, RejectsEmptyInput) {
  EXPECT_THROW(snapshot_targets(ParamSet<float>(5), std::vector<ImageTensor>{}), Error);
}

TEST(KlDivergence, HandExample) {
  const std::vector<double> p{0.75, 0.25}, log_q{std::log(0.5), std::log(0.5)};
  EXPECT_NEAR(kl_divergence(p, log_q), 0.75 * std::log(1.5) + 0.25 * std::log(0.5), 1e-15);
  EXPECT_NEAR(kl_divergence(p, log_q), 0.1308, 5e-5);
}

TEST(DisLoss, HandExampleAgainstUniformStudent) {
  const ParamSet<double> student(2);  // zero weights: uniform policy
  DistillBuffer buf;
  buf.targets.push_back({noise_obs(1, 4)[0], {0.75, 0.25}, 0.0});
  const auto [terms, grad] = dis_loss(student, AugKind::ColorJitter, 5, buf, false);
  EXPECT_NEAR(terms.loss, 0.75 * std::log(1.5) + 0.25 * std::log(0.5), 1e-12);
  EXPECT_EQ(terms.value, 0.0);
}

TEST(DisLoss, SelfDistillationIsAFixedPoint) {
  const auto p = init_params<double>(5, 6, 2.0);
  const auto buf = snapshot_targets(p, noise_obs(6, 7));
  const auto [terms, grad] = dis_loss(p, AugKind::Identity, 0, buf, true);
  EXPECT_LT(std::abs(terms.loss), 1e-10);
  for (double g : grad.flat()) EXPECT_LT(std::abs(g), 1e-10);
}

TEST(DisLoss, ValueFlagRemovesExactlyTheSquaredTerm) {
  const auto teacher = init_params<double>(5, 8);
  const auto student = init_params<double>(5, 9);
  const auto obs = noise_obs(5, 10);
  const auto buf = snapshot_targets(teacher, obs);
  const auto with = dis_loss(student, AugKind::RandomConv, 11, buf, true).first;
  const auto without = dis_loss(student, AugKind::RandomConv, 11, buf, false).first;
  const auto aug = apply(AugKind::RandomConv, 11, obs);
  const auto out = forward(student, aug);
  double msd = 0.0;
  for (std::size_t i = 0; i < obs.size(); ++i) msd += std::pow(buf.targets[i].teacher_value - out[i].value, 2) / 5;
  EXPECT_NEAR(with.loss - without.loss, msd, 1e-12);
  EXPECT_NEAR(with.value, msd, 1e-12);
}

TEST(DisLoss, PassesFiniteDifferenceCheck) {
  const auto teacher = init_params<double>(5, 12);
  const auto p = init_params<double>(5, 13);
  const auto buf = snapshot_targets(teacher, noise_obs(6, 14));
  const LossFn f = [&](const ParamSet<double>& q) {
    auto [t, g] = dis_loss(q, AugKind::ColorJitter, 15, buf, true);
    return LossAndGrad{t.loss, std::move(g)};
  };
  EXPECT_LE(finite_diff_check(p, f, 100, 16), 1e-5);
}

TEST(DaLoss, FixedPointAndDecomposition) {
  const auto p = init_params<double>(5, 17);
  const auto other = init_params<double>(5, 18);
  const auto buf = snapshot_targets(p, noise_obs(5, 19));
  EXPECT_LT(std::abs(da_loss(p, AugKind::Identity, 3, buf, true).first.loss), 1e-10);
  for (auto k : kAllAugKinds) {
    const auto da = da_loss(other, k, 20, buf, true);
    const auto id = dis_loss(other, AugKind::Identity, 20, buf, true);
    const auto kk = dis_loss(other, k, 20, buf, true);
    EXPECT_NEAR(da.first.loss, id.first.loss + kk.first.loss, 1e-12) << aug_name(k);
    auto sum = id.second;
    sum += kk.second;
    for (std::size_t i = 0; i < sum.size(); ++i) ASSERT_NEAR(da.second.flat()[i], sum.flat()[i], 1e-12);
  }
  const auto twice = da_loss(other, AugKind::Identity, 4, buf, true).first.loss;
  EXPECT_NEAR(twice, 2.0 * dis_loss(other, AugKind::Identity, 4, buf, true).first.loss, 1e-12);
}

TEST(DaLoss, PassesFiniteDifferenceCheck) {
  const auto teacher = init_params<double>(5, 21);
  const auto p = init_params<double>(5, 22);
  const auto buf = snapshot_targets(teacher, noise_obs(6, 23));
  const LossFn f = [&](const ParamSet<double>& q) {
    auto [t, g] = da_loss(q, AugKind::RandomCrop, 24, buf, true);
    return LossAndGrad{t.loss, std::move(g)};
  };
  EXPECT_LE(finite_diff_check(p, f, 100, 25), 1e-5);
}

TEST(DaLoss, IsNonNegative) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto teacher = init_params<double>(5, 100 + s, 3.0);
    const auto student = init_params<double>(5, 200 + s, 3.0);
    const auto buf = snapshot_targets(teacher, noise_obs(4, 300 + s));
    for (auto k : kAllAugKinds) EXPECT_GE(da_loss(student, k, s, buf, true).first.loss, 0.0);
  }
}

TEST(DracTerm, IdentityIsExactlyZero) {
  const auto p = init_params<double>(5, 26, 2.0);
  const auto obs = noise_obs(5, 27);
  const auto [terms, grad] = drac_term(p, AugKind::Identity, 1, obs);
  EXPECT_EQ(terms.loss, 0.0);
  for (double g : grad.flat()) EXPECT_EQ(g, 0.0);
}

TEST(DracTerm, ConstantNetworkGivesZero) {
  const ParamSet<double> zero(5);
  const auto obs = noise_obs(4, 28);
  for (auto k : kAllAugKinds) EXPECT_EQ(drac_term(zero, k, 2, obs).first.loss, 0.0) << aug_name(k);
}

TEST(DracTerm, IsNonNegative) {
  const auto p = init_params<double>(5, 29, 2.0);
  const auto obs = game_obs(6, 30);
  for (auto k : kAllAugKinds) EXPECT_GE(drac_term(p, k, 3, obs).first.loss, 0.0) << aug_name(k);
}

TEST(DracTerm, GradientMatchesFixedAnchorLoss) {
  // The anchor is detached: the gradient equals that of dis_loss against a snapshot taken at theta0.
  const auto p0 = init_params<double>(5, 31);
  const auto obs = noise_obs(6, 32);
  const auto anchor = snapshot_targets(p0, obs);
  const auto [dt, dg] = drac_term(p0, AugKind::ColorJitter, 33, obs);
  const auto [ft, fg] = dis_loss(p0, AugKind::ColorJitter, 33, anchor, true);
  EXPECT_EQ(dt.loss, ft.loss);
  EXPECT_EQ(dg, fg);
  const LossFn fixed = [&](const ParamSet<double>& q) {
    auto [t, g] = dis_loss(q, AugKind::ColorJitter, 33, anchor, true);
    return LossAndGrad{t.loss, std::move(g)};
  };
  EXPECT_LE(finite_diff_check(p0, fixed, 100, 34), 1e-5);
}

TEST(DistillPhase, ZeroLearningRateLeavesParamsUnchanged) {
  auto p = init_params<float>(5, 35);
  const auto before = p;
  const auto buf = snapshot_targets(init_params<float>(5, 36), noise_obs(16, 37));
  DistillConfig cfg;
  cfg.lr = 0.0;
  const auto stats = run_distill_phase(p, buf, {AugKind::ColorJitter}, cfg, 1);
  EXPECT_EQ(p, before);
  EXPECT_EQ(stats.optimizer_steps, 3 * 8);
}

TEST(DistillPhase, MinibatchSizeOverridesCount) {
  auto p = init_params<float>(5, 38);
  const auto buf = snapshot_targets(init_params<float>(5, 39), noise_obs(20, 40));
  DistillConfig cfg;
  cfg.epochs = 2;
  cfg.minibatch_size = 8;  // batches of 8, 8, 4
  EXPECT_EQ(run_distill_phase(p, buf, {AugKind::Identity}, cfg, 1).optimizer_steps, 6);
}

TEST(DistillPhase, IsDeterministic) {
  const auto buf = snapshot_targets(init_params<float>(5, 41), noise_obs(16, 42));
  auto run = [&] {
    auto p = init_params<float>(5, 43);
    run_distill_phase(p, buf, {AugKind::ColorJitter, AugKind::RandomConv}, DistillConfig{}, 44);
    return p;
  };
  EXPECT_EQ(run(), run());
}

TEST(DistillPhase, ReducesTheLossTowardsATeacher) {
  auto student = init_params<float>(5, 45);
  const auto buf = snapshot_targets(init_params<float>(5, 46, 2.0), game_obs(64, 47));
  DistillConfig cfg = DistillConfig::exda();
  cfg.minibatch_size = 16;
  cfg.epochs = 10;
  const double before = mean_teacher_kl(student, buf);
  const auto stats = run_distill_phase(student, buf, {AugKind::Identity}, cfg, 48);
  EXPECT_LT(stats.last_epoch_loss, stats.first_loss);
  EXPECT_LT(mean_teacher_kl(student, buf), 0.5 * before);
}

TEST(DistillPhase, TeacherInitializedPhaseStaysCloseOnHeldOutData) {
  // Starting from theta_old the teacher KL is 0; a full ExDA phase must keep it below 0.05.
  const auto teacher = init_params<float>(5, 49, 2.0);
  auto student = teacher;
  const auto train = snapshot_targets(teacher, game_obs(512, 50));
  const auto held_out = snapshot_targets(teacher, game_obs(128, 51));
  EXPECT_LT(mean_teacher_kl(student, held_out), 1e-12);
  const auto stats = run_distill_phase(student, train, {AugKind::ColorJitter}, DistillConfig::exda(), 52);
  EXPECT_EQ(stats.optimizer_steps, 30 * 2);
  EXPECT_LT(mean_teacher_kl(student, held_out), 0.05);
  // The student also becomes more consistent under the augmentation than the teacher.
  std::vector<ImageTensor> probe;
  for (const auto& t : held_out.targets) probe.push_back(t.obs);
  EXPECT_LT(policy_jsd(student, probe, AugKind::ColorJitter, 53), policy_jsd(teacher, probe, AugKind::ColorJitter, 53));
}

TEST(DistillPhase, RejectsEmptyInputs) {
  auto p = init_params<float>(5, 1);
  EXPECT_THROW(run_distill_phase(p, DistillBuffer{}, {AugKind::Identity}, DistillConfig{}, 1), Error);
  const auto buf = snapshot_targets(p, noise_obs(2, 2));
  EXPECT_THROW(run_distill_phase(p, buf, {}, DistillConfig{}, 1), ConfigError);
}

TEST(Rad, IdentityLeavesTheUpdateBitwiseEqual) {
  auto p = init_params<float>(5, 54);
  PpoConfig cfg;
  cfg.steps_per_rollout = 8;
  cfg.n_envs = 4;
  VecEnv envs(GameSpec::gem_maze(), ModeSpec::make(Mode::Train), 4, 55);
  Rng rr(56);
  const auto buf = collect_rollout(p, envs, cfg, rr);
  auto a = p, b = p;
  AdamState<float> sa(a), sb(b);
  Rng ra(57), rb(57);
  ppo_update(a, sa, buf, cfg, identity_combiner(), ra);
  ppo_update(b, sb, rad_augment(buf, AugKind::Identity, 58), cfg, identity_combiner(), rb);
  EXPECT_EQ(a, b);
}

TEST(Rad, BlackZeroesObservationsAndKeepsFields) {
  auto p = init_params<float>(5, 59);
  PpoConfig cfg;
  cfg.steps_per_rollout = 4;
  cfg.n_envs = 2;
  VecEnv envs(GameSpec::gem_maze(), ModeSpec::make(Mode::Train), 2, 60);
  Rng rr(61);
  const auto buf = collect_rollout(p, envs, cfg, rr);
  const auto out = rad_augment(buf, AugKind::Black, 62);
  ASSERT_EQ(out.size(), buf.size());
  EXPECT_EQ(out.advantages, buf.advantages);
  EXPECT_EQ(out.value_targets, buf.value_targets);
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (float v : out.transitions[i].obs.data) ASSERT_EQ(v, 0.0f);
    EXPECT_TRUE(out.transitions[i].obs.same_shape(buf.transitions[i].obs));
    EXPECT_EQ(out.transitions[i].action, buf.transitions[i].action);
    EXPECT_EQ(out.transitions[i].logprob_old, buf.transitions[i].logprob_old);
  }
}

TEST(BufferFile, RoundTrip) {
  const auto buf = snapshot_targets(init_params<float>(5, 63), game_obs(5, 64));
  const std::string path = testing::TempDir() + "asrl_buffer_roundtrip.bin";
  save_distill_buffer(path, buf);
  const auto back = load_distill_buffer(path);
  std::remove(path.c_str());
  ASSERT_EQ(back.size(), buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) {
    EXPECT_EQ(back.targets[i].obs, buf.targets[i].obs);
    for (int a = 0; a < 5; ++a)
      EXPECT_EQ(back.targets[i].teacher_probs[a], static_cast<double>(static_cast<float>(buf.targets[i].teacher_probs[a])));
    EXPECT_EQ(back.targets[i].teacher_value, static_cast<double>(static_cast<float>(buf.targets[i].teacher_value)));
  }
}

TEST(BufferFile, RejectsParameterFiles) {
  const std::string path = testing::TempDir() + "asrl_not_a_buffer.bin";
  save_params(path, init_params<float>(5, 1));
  EXPECT_THROW(load_distill_buffer(path), IoError);
  std::remove(path.c_str());
  EXPECT_THROW(load_distill_buffer(path), IoError);
}
