#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "doctest.h"
#include "json.hpp"
#include "redwatch/cli.hpp"
#include "redwatch/synth.hpp"
#include "support.hpp"

using namespace redwatch;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "redwatch");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("redwatch_cli_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("analyze an empty trace") {
  TempDir dir;
  write_trace(Trace{}, fs::path(dir.file("t.trace")));
  const Result r = invoke({"analyze", dir.file("t.trace"), "--mode", "stores", "--period", "1", "--watchpoints", "4"});
  CHECK(r.code == 0);
  CHECK(r.out.find("no redundancies detected") != std::string::npos);
}

TEST_CASE("analyze defaults and json estimate") {
  TempDir dir;
  const Result s = invoke({"synth", "--out", dir.file("synth_r30.trace"), "--planted", "0.3", "--n-accesses", "100000",
                        "--mode", "stores", "--seed", "4"});
  REQUIRE(s.code == 0);
  const std::string before = slurp(dir.file("synth_r30.trace"));

  const Result r = invoke({"analyze", dir.file("synth_r30.trace"), "--mode", "stores", "--period", "1000", "--seed", "1",
                        "--format", "json"});
  REQUIRE(r.code == 0);
  const auto j = nlohmann::json::parse(r.out);
  CHECK(std::abs(j["estimate"]["f_hat"].get<double>() - 0.30) <= 0.05);
  // Same flags, same bytes; input untouched.
  CHECK(invoke({"analyze", dir.file("synth_r30.trace"), "--mode", "stores", "--period", "1000", "--seed", "1",
             "--format", "json"})
            .out == r.out);
  CHECK(slurp(dir.file("synth_r30.trace")) == before);

  const Result d = invoke({"analyze", dir.file("synth_r30.trace"), "--mode", "stores", "--format", "json"});
  const auto dj = nlohmann::json::parse(d.out);
  CHECK(dj["config"]["period"] == 1000000);
  CHECK(dj["config"]["watchpoints"] == 4);
  CHECK(dj["config"]["seed"] == 0);
  CHECK(dj["config"]["junk_header_bytes"] == 16);
  CHECK(dj["config"]["hibernation_regions"] == nlohmann::json::array({"gc", "loader"}));

  const Result f = invoke({"analyze", dir.file("synth_r30.trace"), "--mode", "stores", "--period", "1000",
                        "--format", "folded", "--out", dir.file("out.folded")});
  CHECK(f.code == 0);
  CHECK(f.out.empty());
  CHECK_FALSE(slurp(dir.file("out.folded")).empty());
}

TEST_CASE("filter flags") {
  TempDir dir;
  rwtest::Builder b;
  b.ncall(1).store(0x10, 1, 0, 0x500).nret(1).ncall(2).store(0x10, 1, 0, 0x500).nret(2);
  write_trace(b.build(), fs::path(dir.file("t.trace")));
  auto pairs = [&](std::vector<std::string> extra) {
    std::vector<std::string> args{"analyze", dir.file("t.trace"), "--mode", "stores", "--period", "1", "--format", "json"};
    args.insert(args.end(), extra.begin(), extra.end());
    const Result r = invoke(args);
    REQUIRE(r.code == 0);
    return nlohmann::json::parse(r.out)["counters"]["resolved_redundant"].get<int>();
  };
  CHECK(pairs({}) == 1);
  CHECK(pairs({"--exclude-ip", "0x500:0x501"}) == 0);
  CHECK(pairs({"--exclude-ip", "0x400:0x480", "--exclude-ip", "0x501:0x600"}) == 1);
  CHECK(pairs({"--hibernate", "none", "--junk-bytes", "0"}) == 1);
  CHECK(pairs({"--watchpoints", "inf"}) == 1);
}

TEST_CASE("bad flags exit 2") {
  TempDir dir;
  write_trace(Trace{}, fs::path(dir.file("t.trace")));
  const std::string t = dir.file("t.trace");
  CHECK(invoke({}).code == 2);
  CHECK(invoke({"analyze", t}).code == 2);
  CHECK(invoke({"analyze", t, "--mode", "both"}).code == 2);
  CHECK(invoke({"analyze", t, "--mode", "loads", "--period", "0"}).code == 2);
  CHECK(invoke({"analyze", t, "--mode", "loads", "--watchpoints", "0"}).code == 2);
  CHECK(invoke({"analyze", t, "--mode", "loads", "--format", "html"}).code == 2);
  CHECK(invoke({"analyze", t, "--mode", "loads", "--exclude-ip", "5"}).code == 2);
  CHECK(invoke({"analyze", t, "--mode", "loads", "--exclude-ip", "9:5"}).code == 2);
  CHECK(invoke({"analyze", t, "--mode", "loads", "--hibernate", "sleep"}).code == 2);
  CHECK(invoke({"analyze", t, "--mode", "loads", "--bogus"}).code == 2);
  CHECK(invoke({"synth", "--planted", "2"}).code == 2);
  CHECK(invoke({"synth", "--fixture", "nope"}).code == 2);
  CHECK(invoke({"compare", t, "--mode", "loads", "--seeds", "0"}).code == 2);
  CHECK(invoke({"--help"}).code == 0);
}

TEST_CASE("malformed traces exit 3") {
  TempDir dir;
  {
    std::ofstream(dir.file("bad.trace")) << "{\"t\":\"hdr\",\"version\":1}\n{\"t\":\"acc\"\n";
  }
  const Result r = invoke({"analyze", dir.file("bad.trace"), "--mode", "loads"});
  CHECK(r.code == 3);
  CHECK(r.err.find("line 2") != std::string::npos);
  CHECK(invoke({"analyze", dir.file("missing.trace"), "--mode", "loads"}).code == 3);

  write_trace(rwtest::Builder{}.ncall(1).nret(2).build(), fs::path(dir.file("stack.trace")));
  CHECK(invoke({"analyze", dir.file("stack.trace"), "--mode", "loads"}).code == 3);
  CHECK(invoke({"oracle", dir.file("stack.trace"), "--mode", "loads"}).code == 3);
}

TEST_CASE("validate") {
  TempDir dir;
  SynthSpec spec;
  spec.n_accesses = 3000;
  spec.eval_frame_ratio = 1.0;
  const Trace good = generate(spec);
  write_trace(good, fs::path(dir.file("good.trace")));
  const Result ok = invoke({"validate", dir.file("good.trace")});
  CHECK(ok.code == 0);
  CHECK(ok.out.rfind("ok", 0) == 0);

  // Truncated file.
  std::string text = slurp(dir.file("good.trace"));
  text.resize(text.size() / 2);
  {
    std::ofstream(dir.file("cut.trace"), std::ios::binary) << text;
  }
  const Result cut = invoke({"validate", dir.file("cut.trace")});
  CHECK(cut.code != 0);
  CHECK(cut.err.find("line ") != std::string::npos);

  // Delete one python call.
  Trace broken = good;
  for (std::size_t i = 0; i < broken.size(); ++i) {
    if (std::holds_alternative<PyCall>(broken[i].payload)) {
      const uint64_t frame = std::get<PyCall>(broken[i].payload).frame_id;
      broken.erase(broken.begin() + static_cast<std::ptrdiff_t>(i));
      std::erase_if(broken, [&](const TraceEvent& e) {
        const auto* r = std::get_if<PyReturn>(&e.payload);
        return r != nullptr && r->frame_id == frame;
      });
      break;
    }
  }
  for (std::size_t i = 0; i < broken.size(); ++i) broken[i].seq = i;
  write_trace(broken, fs::path(dir.file("broken.trace")));
  const Result bad = invoke({"validate", dir.file("broken.trace")});
  CHECK(bad.code == 1);
  CHECK(bad.out.find("HybridMismatch") != std::string::npos);
}

TEST_CASE("oracle command") {
  TempDir dir;
  rwtest::Builder b;
  for (uint64_t i = 1; i <= 4; ++i) b.ncall(i).store(0x40, 9).nret(i);
  write_trace(b.build(), fs::path(dir.file("chain.trace")));
  const Result r = invoke({"oracle", dir.file("chain.trace"), "--mode", "stores"});
  REQUIRE(r.code == 0);
  const auto j = nlohmann::json::parse(r.out);
  CHECK(j["redundant"] == 3);
  CHECK(j["resolutions"] == 3);
  CHECK(j["fraction"] == 1.0);
  CHECK(j["pairs"].size() == 3);
}

TEST_CASE("synth command") {
  TempDir dir;
  for (const char* r : {"0", "1"}) {
    REQUIRE(invoke({"synth", "--out", dir.file("s.trace"), "--planted", r, "--n-accesses", "5000"}).code == 0);
    const auto j = nlohmann::json::parse(invoke({"oracle", dir.file("s.trace"), "--mode", "stores"}).out);
    CHECK(j["fraction"].get<double>() == std::stod(r));
  }
  const Result to_stdout = invoke({"synth", "--fixture", "ta_adx"});
  CHECK(to_stdout.code == 0);
  std::ostringstream expect;
  write_trace(fixture_case_study("ta_adx").trace, expect);
  CHECK(to_stdout.out == expect.str());
}

TEST_CASE("compare command") {
  TempDir dir;
  REQUIRE(invoke({"synth", "--out", dir.file("s.trace"), "--planted", "0.3", "--n-accesses", "100000"}).code == 0);
  auto mean_err = [](const std::string& out) {
    const auto pos = out.find("mean_abs_err ");
    REQUIRE(pos != std::string::npos);
    return std::stod(out.substr(pos + 13));
  };
  const Result one = invoke({"compare", dir.file("s.trace"), "--mode", "stores", "--period", "1000", "--seeds", "1"});
  CHECK(one.code == 0);
  const Result five = invoke({"compare", dir.file("s.trace"), "--mode", "stores", "--period", "1000", "--seeds", "5"});
  CHECK(mean_err(five.out) <= 0.05);
  const Result exact = invoke({"compare", dir.file("s.trace"), "--mode", "stores", "--period", "1", "--watchpoints", "inf",
                            "--seeds", "2"});
  CHECK(mean_err(exact.out) == 0.0);
}
