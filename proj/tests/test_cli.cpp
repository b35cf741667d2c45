#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>

#include <sys/wait.h>

#include "json.hpp"

#include "test_util.hpp"

namespace fs = std::filesystem;
using onenip::testing::scratch_dir;

namespace {

struct CliResult {
    int code = -1;
    std::string out;
};

CliResult cli(const std::string& args, const fs::path& dir) {
    const fs::path out = dir / "stdout.txt";
    const int status = std::system(("\"" ONENIP_CLI "\" " + args + " > \"" + out.string() + "\" 2> \"" + (dir / "stderr.txt").string() + "\"").c_str());
    std::ifstream in(out);
    std::stringstream ss;
    ss << in.rdbuf();
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

const fs::path& workspace() {
    static const fs::path dir = [] {
        fs::path d = scratch_dir("cli");
        const CliResult r = cli("make-toy --out \"" + (d / "toy").string() + "\" --seed 4 --train 4 --good 2 --anomalous 2", d);
        EXPECT_EQ(r.code, 0);
        std::ofstream(d / "tiny.cfg") << "image_size=32\nbackbone=builtin-mini-cnn\nstage_channels=4,4,8,16\nfusion_size=4\n"
                                         "encoder_layers=1\ndecoder_layers=1\nheads=4\nmlp_hidden=32\nrefiner_channels=8\n"
                                         "epochs=2\nlr_drop_epoch=1\nbatch_size=4\nseed=1\n";
        return d;
    }();
    return dir;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

}  // namespace

TEST(Cli, SynthWritesImageMaskPairs) {
    const fs::path& d = workspace();
    const CliResult r = cli("synth --data " + q(d / "toy") + " --out " + q(d / "synth") + " --count 10 --seed 3", d);
    ASSERT_EQ(r.code, 0);
    EXPECT_EQ(std::distance(fs::directory_iterator(d / "synth"), fs::directory_iterator{}), 20);
    std::istringstream lines(r.out);
    std::size_t n = 0;
    for (std::string line; std::getline(lines, line); ++n) EXPECT_NO_THROW((void)nlohmann::json::parse(line));
    EXPECT_EQ(n, 10u);
}

TEST(Cli, ZeroEpochTrainingWritesACheckpoint) {
    const fs::path& d = workspace();
    std::ofstream(d / "zero.cfg") << std::ifstream(d / "tiny.cfg").rdbuf() << "epochs=0\nlr_drop_epoch=0\n";
    const CliResult r = cli("train --quiet --config " + q(d / "zero.cfg") + " --data " + q(d / "toy") + " --out " + q(d / "zero"), d);
    EXPECT_EQ(r.code, 0);
    EXPECT_TRUE(fs::exists(d / "zero" / "checkpoint.onip"));
}

TEST(Cli, TrainThenEvalThenScore) {
    const fs::path& d = workspace();
    CliResult r = cli("train --quiet --config " + q(d / "tiny.cfg") + " --data " + q(d / "toy") + " --out " + q(d / "run"), d);
    ASSERT_EQ(r.code, 0);
    EXPECT_EQ(nlohmann::json::parse(r.out)["epochs"], 2);

    r = cli("eval --checkpoint " + q(d / "run" / "checkpoint.onip") + " --plots " + q(d / "plots"), d);
    ASSERT_EQ(r.code, 0);
    const auto report = nlohmann::json::parse(r.out);
    EXPECT_EQ(report["per_class"].size(), 3u);
    for (const char* k : {"i_roc", "i_pr", "p_roc", "p_pr"}) {
        const double v = report["mean"][k];
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
    EXPECT_TRUE(fs::exists(d / "plots" / "pixel_pr.svg"));
    EXPECT_TRUE(fs::exists(d / "plots" / "image_roc.png"));

    const fs::path image = d / "toy" / "grid" / "test" / "good" / "000.png";
    r = cli("score --checkpoint " + q(d / "run" / "checkpoint.onip") + " --image " + q(image) + " --out " + q(d / "scores"), d);
    ASSERT_EQ(r.code, 0);
    EXPECT_TRUE(report["per_class"].contains(nlohmann::json::parse(r.out)["class_selected"].get<std::string>()));
    EXPECT_TRUE(fs::exists(d / "scores" / "000_heatmap.png"));
    EXPECT_TRUE(fs::exists(d / "scores" / "000_score.onip"));

    r = cli("export-plots --log " + q(d / "run" / "train_log.csv") + " --out " + q(d / "logplots"), d);
    EXPECT_EQ(r.code, 0);
    EXPECT_TRUE(fs::exists(d / "logplots" / "loss.svg"));
}

TEST(Cli, ExitCodes) {
    const fs::path& d = workspace();
    std::ofstream(d / "bad.cfg") << "no_such_key=1\n";
    EXPECT_EQ(cli("train --config " + q(d / "bad.cfg") + " --out " + q(d / "bad"), d).code, 1);
    EXPECT_EQ(cli("frobnicate", d).code, 1);
    EXPECT_EQ(cli("train --quiet --config " + q(d / "tiny.cfg") + " --data /nonexistent/root --out " + q(d / "bad"), d).code, 2);
    std::ofstream(d / "junk.onip") << "not a checkpoint";
    EXPECT_EQ(cli("eval --checkpoint " + q(d / "junk.onip"), d).code, 2);
}
