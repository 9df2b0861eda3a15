#include <unistd.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "seqcond/checkpoint.hpp"
#include "seqcond/errors.hpp"

using namespace seqcond;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("seqcond_ckpt_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& f) const { return (path / f).string(); }
};

TaskSpec copy_task(const ModelConfig& m) {
    TaskSpec spec;
    spec.kind = TaskKind::kCopy;
    spec.seq_len = 4;
    spec.vocab_size = m.vocab_size;
    spec.seed = 5;
    return spec;
}

OptimConfig optim() {
    OptimConfig o;
    o.lr = 3e-3;
    o.warmup_steps = 4;
    return o;
}

template <class T>
void trained(HybridLM<T>& lm, Trainer<T>& tr, const TaskSpec& spec, std::size_t steps) {
    for (std::size_t s = 0; s < steps; ++s) tr.train_step(make_batch(spec, 3, s));
}

std::string flip_byte(std::string bytes, std::size_t at) {
    bytes[at] = char(bytes[at] ^ 0x01);
    return bytes;
}

}  // namespace

TEST_CASE_TEMPLATE("save, load, save is byte-identical", T, float, double) {
    TempDir dir;
    const ModelConfig m = ModelConfig::micro();
    Rng rng(1, RngStream::kInit);
    HybridLM<T> lm(m, rng);
    Trainer<T> tr(lm, optim());
    trained(lm, tr, copy_task(m), 3);
    save_checkpoint(dir / "a.ckpt", lm, m, &tr.optimizer(), 3);

    Rng other(99, RngStream::kInit);
    HybridLM<T> lm2(m, other);
    AdamW<T> opt2(optim(), lm2.parameters());
    const auto man = load_checkpoint(dir / "a.ckpt", lm2, &opt2, m, false);
    CHECK(man.step == 3);
    CHECK(man.has_optimizer);
    CHECK(opt2.step_count() == tr.optimizer().step_count());
    save_checkpoint(dir / "b.ckpt", lm2, m, &opt2, 3);
    CHECK(read_file(dir / "a.ckpt") == read_file(dir / "b.ckpt"));

    const auto pa = lm.parameters(), pb = lm2.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value.data == pb[i]->value.data);
}

TEST_CASE("manifest contents") {
    TempDir dir;
    const ModelConfig m = ModelConfig::micro();
    Rng rng(1, RngStream::kInit);
    HybridLM<double> lm(m, rng);
    save_checkpoint(dir / "m.ckpt", lm, m, static_cast<AdamW<double>*>(nullptr), 17);
    const auto man = read_checkpoint_manifest(dir / "m.ckpt");
    CHECK(man.format_version == kCheckpointVersion);
    CHECK(man.dtype == "f64");
    CHECK(man.step == 17);
    CHECK_FALSE(man.has_optimizer);
    CHECK(man.config_hash == config_hash(m));
    CHECK(man.tensors.size() == lm.parameters().size());
    CHECK(man.payload_bytes == 8 * lm.parameter_count());
    const std::string bytes = read_file(dir / "m.ckpt");
    CHECK(bytes.compare(0, 8, kCheckpointMagic) == 0);
}

TEST_CASE("corrupt and mismatched checkpoints are input errors") {
    TempDir dir;
    const ModelConfig m = ModelConfig::micro();
    Rng rng(1, RngStream::kInit);
    HybridLM<double> lm(m, rng);
    save_checkpoint(dir / "ok.ckpt", lm, m, static_cast<AdamW<double>*>(nullptr), 0);
    const std::string good = read_file(dir / "ok.ckpt");
    auto load = [&](const std::string& file, const ModelConfig& want, bool force) {
        Rng r(2, RngStream::kInit);
        HybridLM<double> target(m, r);
        load_checkpoint(dir / file, target, static_cast<AdamW<double>*>(nullptr), want, force);
    };

    SUBCASE("hash byte flipped") {
        const std::size_t at = good.find(config_hash(m));
        REQUIRE(at != std::string::npos);
        write_file_atomic(dir / "bad.ckpt", flip_byte(good, at));
        CHECK_THROWS_AS(read_checkpoint_manifest(dir / "bad.ckpt"), InputError);
        CHECK_THROWS_AS(load("bad.ckpt", m, true), InputError);
    }
    SUBCASE("bad magic") {
        write_file_atomic(dir / "bad.ckpt", flip_byte(good, 0));
        CHECK_THROWS_AS(load("bad.ckpt", m, false), InputError);
    }
    SUBCASE("truncated payload") {
        write_file_atomic(dir / "bad.ckpt", good.substr(0, good.size() - 8));
        CHECK_THROWS_AS(load("bad.ckpt", m, false), InputError);
    }
    SUBCASE("trailing bytes") {
        write_file_atomic(dir / "bad.ckpt", good + "x");
        CHECK_THROWS_AS(load("bad.ckpt", m, false), InputError);
    }
    SUBCASE("run config differs; force loads anyway") {
        ModelConfig other = m;
        other.rope_base = 5000.0;
        CHECK_THROWS_AS(load("ok.ckpt", other, false), InputError);
        CHECK_NOTHROW(load("ok.ckpt", other, true));
    }
    SUBCASE("dtype mismatch") {
        Rng r(2, RngStream::kInit);
        HybridLM<float> target(m, r);
        CHECK_THROWS_AS(load_checkpoint(dir / "ok.ckpt", target, static_cast<AdamW<float>*>(nullptr), m, false),
                        InputError);
    }
    SUBCASE("missing file") { CHECK_THROWS_AS(load("nope.ckpt", m, false), IoError); }
}

TEST_CASE("resume reproduces the next step") {
    TempDir dir;
    const ModelConfig m = ModelConfig::micro();
    const TaskSpec spec = copy_task(m);

    Rng rng(3, RngStream::kInit);
    HybridLM<double> lm(m, rng);
    Trainer<double> tr(lm, optim());
    trained(lm, tr, spec, 6);
    save_checkpoint(dir / "r.ckpt", lm, m, &tr.optimizer(), 6);
    const double straight = tr.train_step(make_batch(spec, 3, 6)).loss;
    const double straight2 = tr.train_step(make_batch(spec, 3, 7)).loss;

    Rng fresh(3, RngStream::kInit);
    HybridLM<double> lm2(m, fresh);
    Trainer<double> tr2(lm2, optim());
    CHECK(load_checkpoint(dir / "r.ckpt", lm2, &tr2.optimizer(), m, false).step == 6);
    const double resumed = tr2.train_step(make_batch(spec, 3, 6)).loss;
    const double resumed2 = tr2.train_step(make_batch(spec, 3, 7)).loss;
    CHECK(std::abs(resumed - straight) <= 1e-12);
    CHECK(std::abs(resumed2 - straight2) <= 1e-12);
}

TEST_CASE("atomic write creates parent directories and replaces the target") {
    TempDir dir;
    const std::string p = dir / "x/y/z.bin";
    write_file_atomic(p, "one");
    write_file_atomic(p, "two");
    CHECK(read_file(p) == "two");
    for (const auto& e : fs::directory_iterator(fs::path(p).parent_path())) CHECK(e.path().filename() == "z.bin");
}
