#include "helpers.hpp"

#include "mergeforge/datasets.hpp"
#include "mergeforge/repair.hpp"

using namespace mergeforge;
using namespace testutil;

namespace {

LabeledBatch batch_of(const Matrix & x) {
    LabeledBatch b;
    b.inputs = x;
    b.labels.assign(static_cast<size_t>(x.rows()), 0);
    return b;
}

// Per-column mean and population std in double.
std::pair<Eigen::VectorXd, Eigen::VectorXd> moments(const Matrix & a) {
    const Eigen::MatrixXd d    = a.cast<double>();
    const Eigen::VectorXd mean = d.colwise().mean();
    const Eigen::VectorXd var  = (d.rowwise() - mean.transpose()).array().square().colwise().mean();
    return {mean, var.cwiseSqrt()};
}

ActivationStats constant_stats(const Architecture & arch, float mean, float std) {
    ActivationStats s;
    for (const auto & m : arch.modules()) {
        s.modules.push_back({m.name, Eigen::VectorXf::Constant(m.width, mean), Eigen::VectorXf::Constant(m.width, std)});
    }
    return s;
}

// Random dense weights; layer-norm parameters stay near scale 1, shift 0.
WeightSet random_encoder(const Architecture & arch, uint64_t seed) {
    WeightSet w     = random_like(arch.init_encoder(1), seed, 0.5);
    const WeightSet base = arch.init_encoder(1);
    for (size_t i = 0; i < w.size(); ++i) {
        if (w[i].name.rfind("ln", 0) == 0) {
            for (size_t j = 0; j < w[i].data.size(); ++j) {
                w[i].data[j] = base[i].data[j] + 0.2f * w[i].data[j];
            }
        }
    }
    return w;
}

struct Fixture {
    Architecture arch = make_mlp(6, {12, 10, 8}, 3);
    WeightSet    expert_enc = random_encoder(arch, 5);
    WeightSet    merged     = axpy(expert_enc, random_encoder(arch, 6), 0.5);
    WeightSet    head       = arch.init_head(3, 4);
    LabeledBatch data       = batch_of(random_matrix(600, 6, 7));
    ExpertRecord expert{expert_enc, head, "task0", "f0"};
};

// Expert trained briefly on a synthetic task, for tolerances that assume
// trained activation scales.
struct Trained {
    Architecture arch  = make_mlp(8, {32, 32}, 3);
    TaskSuite    suite = synth_suite(1, 8, 3, 600, 200, 2);
    ExpertRecord expert;

    Trained() {
        TrainConfig cfg;
        cfg.steps        = 300;
        cfg.warmup_steps = 30;
        cfg.peak_lr      = 0.05;
        const Model m    = train(arch, {arch.init_encoder(3), arch.init_head(3, 4)}, suite.tasks[0].train, cfg);
        expert           = {m.encoder, m.head, "task0", "f0"};
    }
};

} // namespace

TEST_CASE("compute_stats basics") {
    const Architecture arch = make_mlp(1, {1}, 2, false);
    WeightSet          enc  = arch.init_encoder(0);
    enc.at("fc0.weight").data = {1.0f};
    enc.at("fc0.bias").data   = {0.0f};

    Matrix x(2, 1);
    x << 0, 2;
    const auto s = compute_stats(arch, enc, batch_of(x));
    REQUIRE(s.modules.size() == 1);
    CHECK(s.modules[0].mean(0) == 1.0f);
    CHECK(s.modules[0].std(0) == 1.0f);

    enc.at("fc0.weight").data = {0.0f};
    enc.at("fc0.bias").data   = {3.5f};
    const auto c = compute_stats(arch, enc, batch_of(random_matrix(50, 1, 1)));
    CHECK(c.modules[0].mean(0) == 3.5f);
    CHECK(c.modules[0].std(0) == 0.0f);

    CHECK(error_code_of([&] { compute_stats(arch, enc, batch_of(Matrix(0, 1))); }) == Errc::empty_input);
}

TEST_CASE("pooled statistics equal statistics of the concatenation") {
    Fixture            f;
    const LabeledBatch a = f.data.slice(0, 130);
    const LabeledBatch b = f.data.slice(130, 600);
    const auto         pooled = compute_stats(f.arch, f.expert_enc, std::vector<const LabeledBatch *>{&a, &b});
    const auto         whole  = compute_stats(f.arch, f.expert_enc, f.data);
    for (size_t k = 0; k < whole.modules.size(); ++k) {
        CHECK((pooled.modules[k].mean - whole.modules[k].mean).cwiseAbs().maxCoeff() <= 1e-6f);
        CHECK((pooled.modules[k].std - whole.modules[k].std).cwiseAbs().maxCoeff() <= 1e-6f);
        CHECK(whole.modules[k].std.minCoeff() >= 0.0f);
        CHECK(whole.modules[k].module == f.arch.modules()[k].name);
    }
    // double-precision oracle on the first capture
    const auto [mean, std] = moments(module_capture(f.arch, 0, f.expert_enc, f.data.inputs));
    CHECK((whole.modules[0].mean.cast<double>() - mean).cwiseAbs().maxCoeff() <= 1e-6);
    CHECK((whole.modules[0].std.cast<double>() - std).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("degenerate correction pins activations") {
    Fixture    f;
    TactBundle b;
    b.target  = constant_stats(f.arch, 5.0f, 0.0f);
    b.running = constant_stats(f.arch, 0.0f, 1.0f);
    for (const auto & a : corrected_capture(f.arch, f.merged, b, f.data.inputs)) {
        CHECK((a.array() == 5.0f).all());
    }
}

TEST_CASE("self-normalization is a near no-op") {
    Trained      t;
    const auto & data = t.suite.tasks[0].train;
    const auto & enc  = t.expert.encoder;
    const auto   s    = compute_stats(t.arch, enc, data);
    TactBundle   b{"t", s, s, kDefaultEpsilon};
    const Matrix plain = forward(t.arch, enc, t.expert.head, data.inputs);
    CHECK((corrected_forward(t.arch, enc, t.expert.head, b, data.inputs) - plain).cwiseAbs().maxCoeff() <= 1e-4f);

    // merged == expert: TACT changes nothing beyond epsilon scaling
    const auto self = tact_correct(t.arch, enc, t.expert, data);
    CHECK((corrected_forward(t.arch, enc, t.expert.head, self, data.inputs) - plain).cwiseAbs().maxCoeff() <= 1e-4f);

    // identical endpoints in global repair
    const auto same = repair_global(t.arch, enc, enc, enc, 0.3, data);
    CHECK((corrected_forward(t.arch, enc, t.expert.head, same, data.inputs) - plain).cwiseAbs().maxCoeff() <= 1e-4f);
}

TEST_CASE("identity correction is pointwise exact") {
    Fixture    f;
    TactBundle b;
    b.epsilon = 0.0;
    b.target  = constant_stats(f.arch, 0.0f, 1.0f);
    b.running = b.target;
    CHECK(corrected_forward(f.arch, f.merged, f.head, b, f.data.inputs) ==
          forward(f.arch, f.merged, f.head, f.data.inputs));
}

TEST_CASE("TACT matches expert moments at every module") {
    Fixture    f;
    const auto b1 = tact_correct(f.arch, f.merged, f.expert, f.data);
    const auto b2 = tact_correct(f.arch, f.merged, f.expert, f.data);
    CHECK(encode_tact(b1, f.arch.id()) == encode_tact(b2, f.arch.id()));

    const auto target = compute_stats(f.arch, f.expert_enc, f.data);
    const auto acts   = corrected_capture(f.arch, f.merged, b1, f.data.inputs);
    for (size_t k = 0; k < acts.size(); ++k) {
        const auto [mean, std] = moments(acts[k]);
        CHECK((mean - target.modules[k].mean.cast<double>()).cwiseAbs().maxCoeff() <= 1e-3);
        CHECK((std - target.modules[k].std.cast<double>()).cwiseAbs().maxCoeff() <= 1e-3);
    }
    for (const auto & d : stats_diagnostics(f.arch, f.merged, f.expert_enc, &b1, f.data)) {
        CHECK(d.variance_ratio >= 0.9);
        CHECK(d.variance_ratio <= 1.1);
    }
    CHECK(error_code_of([&] { tact_correct(f.arch, f.merged, f.expert, batch_of(Matrix(0, 6))); }) ==
          Errc::empty_input);
}

TEST_CASE("TACT costs two passes per task") {
    Fixture     f;
    PassCounter counter;
    for (int t = 0; t < 5; ++t) {
        tact_correct(f.arch, f.merged, f.expert, f.data, kDefaultEpsilon, &counter);
    }
    CHECK(counter.passes == 10);
}

TEST_CASE("global repair") {
    Fixture f;
    const WeightSet other = random_like(f.expert_enc, 9, 0.5);
    const auto      s1    = compute_stats(f.arch, f.expert_enc, f.data);
    const auto      s2    = compute_stats(f.arch, other, f.data);
    const auto      r0    = repair_global(f.arch, f.merged, f.expert_enc, other, 0.0, f.data);
    const auto      rh    = repair_global(f.arch, f.merged, f.expert_enc, other, 0.5, f.data);
    for (size_t k = 0; k < s1.modules.size(); ++k) {
        CHECK(r0.target.modules[k].mean == s1.modules[k].mean);
        CHECK(r0.target.modules[k].std == s1.modules[k].std);
        const Eigen::VectorXf mid = 0.5f * (s1.modules[k].mean + s2.modules[k].mean);
        CHECK((rh.target.modules[k].mean - mid).cwiseAbs().maxCoeff() <= 1e-6f);
    }
    CHECK(error_code_of([&] { repair_global(f.arch, f.merged, f.expert_enc, other, 1.5, f.data); }) ==
          Errc::invalid_argument);
}

TEST_CASE("statistics diagnostics") {
    Fixture f;
    for (const auto & d : stats_diagnostics(f.arch, f.expert_enc, f.expert_enc, nullptr, f.data)) {
        CHECK(d.l2_distance == 0.0);
        CHECK(d.variance_ratio == 1.0);
    }
    const Architecture lin = make_mlp(4, {5}, 2, false);
    WeightSet          e   = random_like(lin.init_encoder(0), 3);
    e.at("fc0.bias").data.assign(5, 0.0f);
    WeightSet m = scaled(e, 2.0);
    const auto d = stats_diagnostics(lin, m, e, nullptr, batch_of(random_matrix(200, 4, 2)));
    REQUIRE(d.size() == 1);
    CHECK(d[0].variance_ratio == doctest::Approx(4.0).epsilon(1e-6));
    CHECK(d[0].l2_distance > 0.0);

    WeightSet zero = zeros_like(e);
    CHECK(stats_diagnostics(lin, m, zero, nullptr, batch_of(random_matrix(20, 4, 2)))[0].variance_ratio ==
          kInfiniteRatio);
}

TEST_CASE("correction bundles serialize") {
    Fixture    f;
    const auto b   = tact_correct(f.arch, f.merged, f.expert, f.data, 2e-5);
    const auto dir = temp_dir("tact");
    save_tact(b, f.arch.id(), dir / "t.mfwt");
    const auto back = load_tact(dir / "t.mfwt");
    CHECK(back.task_id == "task0");
    CHECK(back.epsilon == 2e-5);
    REQUIRE(back.target.modules.size() == b.target.modules.size());
    for (size_t k = 0; k < b.target.modules.size(); ++k) {
        CHECK(back.target.modules[k].module == b.target.modules[k].module);
        CHECK(back.target.modules[k].mean == b.target.modules[k].mean);
        CHECK(back.target.modules[k].std == b.target.modules[k].std);
        CHECK(back.running.modules[k].mean == b.running.modules[k].mean);
        CHECK(back.running.modules[k].std == b.running.modules[k].std);
    }
    CHECK(encode_tact(back, f.arch.id()) == encode_tact(b, f.arch.id()));
    auto bytes = encode_tact(b, f.arch.id());
    bytes.resize(bytes.size() - 4);
    CHECK_THROWS_AS(decode_tact(bytes), Error);

    TactBundle bad = b;
    bad.running.modules.pop_back();
    CHECK(error_code_of([&] { corrected_forward(f.arch, f.merged, f.head, bad, f.data.inputs); }) ==
          Errc::shape_mismatch);
}
