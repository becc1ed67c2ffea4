#include "run_manifest.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <memory>

#include "cranio/error.hpp"

namespace cranio::cli {

namespace fs = std::filesystem;

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "sha256", "cannot read " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1)
    throw Error(ErrorKind::State, "sha256", "digest initialisation failed");
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

void prepare_output_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_directory(dir))
    throw Error(ErrorKind::Usage, "output", dir.string() + " exists and is not a directory");
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force)
      throw Error(ErrorKind::Usage, "output", dir.string() + " is not empty (pass --force to replace a previous run)");
    if (!fs::exists(dir / RunManifest::kFileName))
      throw Error(ErrorKind::Usage, "output",
                  "refusing to clear " + dir.string() + ": it has no " + RunManifest::kFileName);
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

std::string timestamp_now() {
  std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  if (const char* epoch = std::getenv("SOURCE_DATE_EPOCH")) t = static_cast<std::time_t>(std::strtoll(epoch, nullptr, 10));
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

RunManifest::RunManifest(std::string command, fs::path out_dir)
    : command_(std::move(command)), out_(std::move(out_dir)), started_(timestamp_now()) {}

void RunManifest::add_input(const std::string& role, const fs::path& path) { inputs_[role] = path.string(); }

void RunManifest::collect_outputs() {
  outputs_.clear();
  for (const auto& e : fs::recursive_directory_iterator(out_))
    if (e.is_regular_file() && e.path() != out_ / kFileName)
      outputs_.push_back(fs::relative(e.path(), out_).generic_string());
  std::sort(outputs_.begin(), outputs_.end());
}

void RunManifest::finish() {
  nlohmann::json artifacts = nlohmann::json::object();
  for (const std::string& rel : outputs_) {
    const fs::path p = out_ / rel;
    if (!fs::is_regular_file(p) || fs::file_size(p) == 0)
      throw Error(ErrorKind::Io, command_, "output " + p.string() + " is missing or empty");
    artifacts[rel] = sha256_file(p);
  }
  nlohmann::json m;
  m["command"] = command_;
  m["config"] = config_;
  m["inputs"] = inputs_;
  m["output_dir"] = out_.string();
  m["seed"] = seed_ ? nlohmann::json(*seed_) : nlohmann::json(nullptr);
  m["artifacts"] = artifacts;
  m["started"] = started_;
  m["finished"] = timestamp_now();
  std::ofstream f(out_ / kFileName, std::ios::trunc);
  f << m.dump(2) << '\n';
  if (!f.flush()) throw Error(ErrorKind::Io, command_, "cannot write " + (out_ / kFileName).string());
}

std::vector<std::string> verify_run(const fs::path& dir) {
  std::ifstream in(dir / RunManifest::kFileName);
  if (!in) throw Error(ErrorKind::NotFound, "verify", "no " + std::string(RunManifest::kFileName) + " in " + dir.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, "verify", std::string("bad run manifest: ") + e.what());
  }
  std::vector<std::string> bad;
  for (const auto& [rel, sum] : m.at("artifacts").items()) {
    const fs::path p = dir / rel;
    if (!fs::is_regular_file(p) || sha256_file(p) != sum.get<std::string>()) bad.push_back(rel);
  }
  return bad;
}

}  // namespace cranio::cli
