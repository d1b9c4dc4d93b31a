#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>

#include "adl/checkpoint.hpp"
#include "adl/digest.hpp"
#include "adl/io.hpp"
#include "adl/projection.hpp"
#include "adl/rng.hpp"
#include "adl/tokenizer.hpp"

using namespace adl;

static fs::path temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("adl_test_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TEST_CASE("sha256 matches the published test vectors") {
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq") ==
        "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");
}

TEST_CASE("sha256 incremental updates equal one-shot hashing") {
  std::string msg(1000, 'x');
  for (size_t i = 0; i < msg.size(); ++i) msg[i] = char('a' + (i * 7) % 26);
  Sha256 h;
  h.update(msg.substr(0, 13));
  h.update(msg.substr(13, 64));
  h.update(msg.substr(77));
  auto d = h.finish();
  CHECK(to_hex(d.data(), d.size()) == sha256_hex(msg));
}

TEST_CASE("rng streams are deterministic and seed-separated") {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  bool differs = false;
  Rng a2(42);
  for (int i = 0; i < 10; ++i) differs = differs || (a2.next_u64() != c.next_u64());
  CHECK(differs);
}

TEST_CASE("rng fork yields streams unlike the parent and each other") {
  Rng parent(7);
  Rng f1 = parent.fork(1);
  Rng f2 = parent.fork(2);
  CHECK(f1.next_u64() != f2.next_u64());
  Rng parent2(7);
  Rng g1 = parent2.fork(1);
  Rng f1b = Rng(7).fork(1);
  CHECK(g1.next_u64() == f1b.next_u64());
}

TEST_CASE("rng next_below stays in range and reaches every value") {
  Rng r(123);
  std::vector<int> seen(5, 0);
  for (int i = 0; i < 2000; ++i) {
    uint64_t v = r.next_below(5);
    REQUIRE(v < 5);
    seen[size_t(v)]++;
  }
  for (int count : seen) CHECK(count > 200);
}

TEST_CASE("rng normal has roughly standard moments") {
  Rng r(2024);
  const int n = 20000;
  double sum = 0, sumsq = 0;
  for (int i = 0; i < n; ++i) {
    double x = r.normal();
    sum += x;
    sumsq += x * x;
  }
  double mean = sum / n;
  double var = sumsq / n - mean * mean;
  CHECK(std::abs(mean) < 0.05);
  CHECK(std::abs(var - 1.0) < 0.1);
}

TEST_CASE("rng shuffle permutes without loss and reproduces under a fixed seed") {
  std::vector<int> v(50);
  for (int i = 0; i < 50; ++i) v[size_t(i)] = i;
  std::vector<int> w = v;
  Rng r(9);
  r.shuffle(w);
  CHECK(w != v);
  std::vector<int> ws = w;
  std::sort(ws.begin(), ws.end());
  CHECK(ws == v);
  std::vector<int> w2 = v;
  Rng r2(9);
  r2.shuffle(w2);
  CHECK(w2 == w);
}

TEST_CASE("seed_from_label separates labels") {
  CHECK(seed_from_label("extract") != seed_from_label("steer"));
  CHECK(seed_from_label("x", 1) != seed_from_label("x", 2));
  CHECK(seed_from_label("same") == seed_from_label("same"));
}

TEST_CASE("atomic file write round-trips and leaves no temp file") {
  fs::path dir = temp_dir("io");
  fs::path f = dir / "sub" / "blob.bin";
  std::string payload = "hello\0world\n binary \xff\x01", full(payload.data(), 22);
  write_file_atomic(f, full);
  CHECK(read_file(f) == full);
  CHECK(!fs::exists(dir / "sub" / "blob.bin.tmp"));
  write_file_atomic(f, "second");
  CHECK(read_file(f) == "second");
}

TEST_CASE("float blobs round-trip bit-exactly") {
  std::vector<float> vals = {0.0f, -0.0f, 1.5f, -3.25e-7f, 1e30f, 1.17549435e-38f};
  std::string bytes = floats_to_bytes(vals.data(), vals.size());
  auto back = bytes_to_floats(bytes);
  REQUIRE(back.size() == vals.size());
  CHECK(std::memcmp(back.data(), vals.data(), bytes.size()) == 0);
  CHECK_THROWS_AS(bytes_to_floats("abc"), ValidationError);
}

TEST_CASE("tokenizer requires the special tokens and unique entries") {
  CHECK_THROWS_AS(WordTokenizer({"<bos>", "<eos>", "<unk>"}), ValidationError);
  CHECK_THROWS_AS(WordTokenizer({"<bos>", "<eos>", "<unk>", "<pad>", "a", "a"}), ValidationError);
}

TEST_CASE("tokenizer encodes words, newlines and unknowns") {
  WordTokenizer tok({"<bos>", "<eos>", "<unk>", "<pad>", "\n", "the", "cat", "sat"});
  auto ids = tok.encode("the cat  sat\nthe dog");
  std::vector<int> want = {tok.bos_id(), 5, 6, 7, 4, 5, tok.unk_id()};
  CHECK(ids == want);
  CHECK(tok.decode({5, 6, 7, 4, 5}) == "the cat sat\nthe");
  auto no_bos = tok.encode("cat", false);
  CHECK(no_bos == std::vector<int>{6});
}

TEST_CASE("tokenizer fingerprint keys on vocabulary content") {
  WordTokenizer a({"<bos>", "<eos>", "<unk>", "<pad>", "x"});
  WordTokenizer b({"<bos>", "<eos>", "<unk>", "<pad>", "x"});
  WordTokenizer c({"<bos>", "<eos>", "<unk>", "<pad>", "y"});
  CHECK(a.fingerprint() == b.fingerprint());
  CHECK(a.fingerprint() != c.fingerprint());
  CHECK_THROWS_AS(a.id_to_token(99), ValidationError);
}

TEST_CASE("safetensors round-trip is bit-exact") {
  fs::path dir = temp_dir("st");
  TensorMap t;
  RMatF m(2, 3);
  m << 1.0f, -2.5f, 3.25e-7f, 0.0f, -0.0f, 1e30f;
  Eigen::VectorXf v(4);
  v << -1.f, 0.5f, 2.f, -8.f;
  t["w.matrix"] = tensor_from(m);
  t["w.vector"] = tensor_from(v);
  write_safetensors(dir / "m.safetensors", t);
  auto back = read_safetensors(dir / "m.safetensors");
  REQUIRE(back.size() == 2);
  RMatF m2 = matrix_from(back.at("w.matrix"), "w.matrix");
  Eigen::VectorXf v2 = vector_from(back.at("w.vector"), "w.vector");
  REQUIRE(m2.rows() == 2);
  REQUIRE(m2.cols() == 3);
  CHECK(std::memcmp(m2.data(), m.data(), sizeof(float) * 6) == 0);
  CHECK(std::memcmp(v2.data(), v.data(), sizeof(float) * 4) == 0);
}

TEST_CASE("safetensors rejects foreign dtypes and bad offsets") {
  fs::path dir = temp_dir("stbad");
  std::string head = R"({"t":{"dtype":"I64","shape":[1],"data_offsets":[0,8]}})";
  while (head.size() % 8) head += ' ';
  uint64_t hlen = head.size();
  std::string blob(8, '\0');
  std::string raw(reinterpret_cast<const char*>(&hlen), 8);
  raw += head + blob;
  write_file_atomic(dir / "bad.safetensors", raw);
  CHECK_THROWS_AS(read_safetensors(dir / "bad.safetensors"), ValidationError);

  std::string head2 = R"({"t":{"dtype":"F32","shape":[4],"data_offsets":[0,8]}})";
  while (head2.size() % 8) head2 += ' ';
  uint64_t hlen2 = head2.size();
  std::string raw2(reinterpret_cast<const char*>(&hlen2), 8);
  raw2 += head2 + blob;
  write_file_atomic(dir / "bad2.safetensors", raw2);
  CHECK_THROWS_AS(read_safetensors(dir / "bad2.safetensors"), ValidationError);
}

TEST_CASE("project_replace keeps the source on-direction and the target off-direction") {
  Eigen::VectorXf dir(2), target(2), source(2);
  dir << 1.f, 0.f;
  target << 3.f, 5.f;
  source << 1.f, 2.f;
  Eigen::VectorXf out = project_replace(target, source, dir);
  CHECK(out[0] == 1.0f);
  CHECK(out[1] == 5.0f);
}

TEST_CASE("project_replace is idempotent and a no-op on itself") {
  Rng r(5);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::VectorXf d(8), t(8), s(8);
    for (int i = 0; i < 8; ++i) {
      d[i] = float(r.normal());
      t[i] = float(r.normal());
      s[i] = float(r.normal());
    }
    Eigen::VectorXf once = project_replace(t, s, d);
    Eigen::VectorXf twice = project_replace(once, s, d);
    CHECK((twice - once).norm() <= 1e-5f * (1.0f + once.norm()));
    Eigen::VectorXf self = project_replace(t, t, d);
    CHECK((self - t).norm() <= 1e-5f * (1.0f + t.norm()));
    float on_dir = d.dot(once) / d.norm();
    float on_dir_src = d.dot(s) / d.norm();
    CHECK(std::abs(on_dir - on_dir_src) < 1e-4f);
  }
  Eigen::VectorXf zero = Eigen::VectorXf::Zero(3);
  Eigen::VectorXf x = Eigen::VectorXf::Ones(3);
  CHECK_THROWS_AS(project_replace(x, x, zero), NumericError);
}

TEST_CASE("orthonormalize drops dependent vectors and spans the input") {
  std::vector<Eigen::VectorXf> vs;
  Eigen::VectorXf a(3), b(3), c(3);
  a << 1.f, 1.f, 0.f;
  b << 2.f, 2.f, 0.f;  // dependent on a
  c << 0.f, 1.f, 1.f;
  vs = {a, b, c};
  auto basis = orthonormalize(vs);
  REQUIRE(basis.size() == 2);
  for (size_t i = 0; i < basis.size(); ++i) {
    CHECK(std::abs(basis[i].norm() - 1.0f) < 1e-5f);
    for (size_t j = i + 1; j < basis.size(); ++j)
      CHECK(std::abs(basis[i].dot(basis[j])) < 1e-5f);
  }
  Eigen::VectorXf res = ablate_span(a, basis);
  CHECK(res.norm() < 1e-5f);
  Eigen::VectorXf off(3);
  off << 1.f, -1.f, 2.f;
  Eigen::VectorXf abl = ablate_span(off, basis);
  for (const auto& e : basis) CHECK(std::abs(e.dot(abl)) < 1e-5f);
}
