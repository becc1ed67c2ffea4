// Command-line front end: synthetic data, training, generation, evaluation,
// retrieval and reporting. Every command writes into one run directory with a
// run.json manifest at its root.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "cranio/data.hpp"
#include "cranio/metrics.hpp"
#include "cranio/retrieval.hpp"
#include "cranio/train.hpp"
#include "run_manifest.hpp"

namespace fs = std::filesystem;
using namespace cranio;
using cli::RunManifest;

namespace {

Error usage(const std::string& message) { return Error(ErrorKind::Usage, "usage", message); }

struct NamedImages {
  std::vector<Image> images;
  std::vector<std::string> names;  // file names, sorted
};

NamedImages load_dir(const fs::path& dir, const std::string& what) {
  if (!fs::is_directory(dir)) throw Error(ErrorKind::NotFound, what, "no such directory: " + dir.string());
  NamedImages out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") out.names.push_back(e.path().filename().string());
  std::sort(out.names.begin(), out.names.end());
  if (out.names.empty()) throw Error(ErrorKind::NotFound, what, "no PNG images in " + dir.string());
  for (const auto& n : out.names) out.images.push_back(load_image(dir / n));
  return out;
}

std::vector<Index> identities_of(const std::vector<std::string>& names, const std::string& what) {
  std::vector<Index> ids;
  for (const auto& n : names) {
    const Index id = identity_from_name(n);
    if (id < 0) throw Error(ErrorKind::Format, what, "no identity token (id<N>) in file name " + n);
    ids.push_back(id);
  }
  return ids;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  f << text;
  if (!f.flush()) throw Error(ErrorKind::Io, "write", "cannot write " + path.string());
}

std::string fixed(double v, int digits = 6) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

// ---- synth-data ----------------------------------------------------------

struct SynthArgs {
  std::uint64_t seed = 7;
  Index identities = 51;
  Index size = 64;
  double ratio = 0.8;
  fs::path out;
  bool force = false;
};

void cmd_synth(const SynthArgs& a) {
  if (a.identities < 2) throw usage("--identities must be >= 2 (each identity gives a frontal and a lateral pair)");
  cli::prepare_output_dir(a.out, a.force);
  DatasetOptions o;
  o.seed = a.seed;
  o.identities = a.identities;
  o.image_size = a.size;
  o.ratio = a.ratio;
  const Dataset d = build_dataset(o);
  write_dataset(d, a.out);

  RunManifest run("synth-data", a.out);
  run.set_seed(a.seed);
  run.set_config({{"identities", a.identities}, {"image_size", a.size}, {"ratio", a.ratio}});
  run.collect_outputs();
  run.finish();
  std::cout << d.original_pairs << " pairs (" << d.original_pairs - static_cast<Index>(d.test.size()) << " train, "
            << d.test.size() << " test); " << d.train.size() << " training pairs after augmentation\n";
}

// ---- train ---------------------------------------------------------------

struct TrainArgs {
  std::string variant;
  fs::path data, config, out;
  std::optional<Index> epochs;
  std::optional<std::uint64_t> seed;
  bool force = false;
};

void cmd_train(const TrainArgs& a) {
  TrainConfig c = a.config.empty() ? TrainConfig{} : load_train_config(a.config);
  if (!a.variant.empty()) {
    try {
      c.variant = parse_variant(a.variant);
    } catch (const Error& e) {
      throw usage("unknown --variant '" + a.variant + "' (expected one of: cyclegan, cgan, cut, fastcut)");
    }
  }
  if (a.epochs) c.epochs = *a.epochs;
  if (a.seed) c.seed = *a.seed;
  c.validate();

  const DatasetManifest m = read_manifest(a.data);
  if (m.image_size != c.image_size)
    throw Error(ErrorKind::InvalidArgument, "train",
                "dataset images are " + std::to_string(m.image_size) + "px but image_size = " +
                    std::to_string(c.image_size));
  std::vector<ImagePair> pairs = load_split(a.data, m, "train");
  cli::prepare_output_dir(a.out, a.force);

  Trainer<float> trainer(c, std::move(pairs));
  write_text(a.out / "config.txt", c.to_text());
  {
    std::ofstream log(a.out / "loss.log", std::ios::trunc);
    trainer.run(a.out, &log);
  }
  nlohmann::json cj;
  to_json(cj, c);
  RunManifest run("train", a.out);
  run.set_seed(c.seed);
  run.set_config(cj);
  run.add_input("data", a.data);
  if (!a.config.empty()) run.add_input("config", a.config);
  run.collect_outputs();
  run.finish();
  const LossConfig l = c.loss();
  std::cout << to_string(c.variant) << ": " << trainer.completed_steps() << " steps over " << c.epochs
            << " epochs; lambda_x=" << l.lambda_x << " lambda_y=" << l.lambda_y << "\n";
}

// ---- generate ------------------------------------------------------------

struct GenerateArgs {
  fs::path checkpoint, in, out;
  bool force = false;
};

void cmd_generate(const GenerateArgs& a) {
  const Translator<float> t = load_translator<float>(a.checkpoint);
  const NamedImages skulls = load_dir(a.in, "generate");
  cli::prepare_output_dir(a.out, a.force);
  const std::vector<Image> faces = generate(t, skulls.images);
  for (std::size_t i = 0; i < faces.size(); ++i) save_image(faces[i], a.out / skulls.names[i]);

  RunManifest run("generate", a.out);
  run.set_seed(t.config.seed);
  run.set_config({{"variant", to_string(t.config.variant)}, {"images", faces.size()}});
  run.add_input("checkpoint", a.checkpoint);
  run.add_input("in", a.in);
  run.collect_outputs();
  run.finish();
  std::cout << faces.size() << " faces written\n";
}

// ---- train-embedder ------------------------------------------------------

struct EmbedderArgs {
  fs::path faces, out;
  Index epochs = 40;
  std::uint64_t seed = 0;
  bool force = false;
};

void cmd_train_embedder(const EmbedderArgs& a) {
  const NamedImages faces = load_dir(a.faces, "train-embedder");
  const std::vector<Index> ids = identities_of(faces.names, "train-embedder");
  // Labels are the identities renumbered densely in ascending order.
  std::map<Index, Index> label_of;
  for (Index id : ids) label_of.emplace(id, 0);
  Index next = 0;
  for (auto& [id, label] : label_of) label = next++;
  if (label_of.size() < 2) throw Error(ErrorKind::InvalidArgument, "train-embedder", "need faces of at least 2 identities");

  // Each face goes through the dataset augmentations once more, so the
  // classifier sees the same kinds of variation as the translation models.
  std::vector<ImagePair> pairs;
  for (std::size_t i = 0; i < faces.images.size(); ++i) {
    ImagePair p;
    p.skull = p.face = faces.images[i];
    p.identity = ids[i];
    p.source = static_cast<Index>(i);
    pairs.push_back(std::move(p));
  }
  std::vector<Image> images;
  std::vector<Index> labels;
  for (const ImagePair& p : augment(pairs, derive_seed(a.seed, 1))) {
    images.push_back(p.face);
    labels.push_back(label_of.at(p.identity));
  }
  cli::prepare_output_dir(a.out, a.force);
  EmbedderTrainConfig ec;
  ec.epochs = a.epochs;
  ec.seed = a.seed;
  ec.net.image_size = images.front().height;
  std::ofstream log(a.out / "train.log", std::ios::trunc);
  const Embedder<float> e = train_embedder<float>(ec, images, labels, &log);
  log.close();
  write_checkpoint(a.out / "embedder.bin", embedder_checkpoint(e));

  RunManifest run("train-embedder", a.out);
  run.set_seed(a.seed);
  run.set_config({{"epochs", a.epochs}, {"images", images.size()}, {"identities", label_of.size()}});
  run.add_input("faces", a.faces);
  run.collect_outputs();
  run.finish();
  std::cout << "embedder trained on " << images.size() << " images of " << label_of.size() << " identities\n";
}

// ---- evaluate ------------------------------------------------------------

struct EvaluateArgs {
  fs::path generated, real, embedder, out;
  Index splits = 4;
  bool force = false;
};

void cmd_evaluate(const EvaluateArgs& a) {
  if (a.embedder.empty())
    throw usage("FID and IS are computed on embedder features: pass --embedder (create one with train-embedder)");
  const Embedder<float> e = load_embedder<float>(a.embedder);
  const NamedImages gen = load_dir(a.generated, "evaluate");
  const NamedImages real = load_dir(a.real, "evaluate");
  std::map<std::string, std::size_t> real_index;
  for (std::size_t i = 0; i < real.names.size(); ++i) real_index[real.names[i]] = i;
  for (const auto& n : gen.names)
    if (!real_index.count(n))
      throw Error(ErrorKind::InvalidArgument, "evaluate", "generated image " + n + " has no ground truth in " +
                                                            a.real.string());
  if (gen.images.size() < 2) throw Error(ErrorKind::InvalidArgument, "evaluate", "FID needs at least 2 images");
  cli::prepare_output_dir(a.out, a.force);

  std::ostringstream pairs;
  pairs << "image\tssim\n";
  double ssim_sum = 0.0;
  for (std::size_t i = 0; i < gen.images.size(); ++i) {
    const double s = ssim(gen.images[i], real.images[real_index[gen.names[i]]]);
    ssim_sum += s;
    pairs << gen.names[i] << '\t' << fixed(s) << '\n';
  }
  const double mean_ssim = ssim_sum / static_cast<double>(gen.images.size());
  const Embedding eg = embed_for_metrics(e, gen.images), er = embed_for_metrics(e, real.images);
  const double f = fid(er.features, eg.features);
  const InceptionScore is = inception_score(eg.probs, std::min<Index>(a.splits, eg.probs.probs.rows()));

  nlohmann::json metrics = {{"FID", f}, {"IS", {{"mean", is.mean}, {"std", is.std}}}, {"SSIM", mean_ssim}};
  write_text(a.out / "metrics.json", metrics.dump(2) + "\n");
  write_text(a.out / "ssim_pairs.tsv", pairs.str());
  const std::string report = "FID\t" + fixed(f, 4) + "\nIS\t" + fixed(is.mean, 4) + " ± " + fixed(is.std, 4) +
                             "\nSSIM\t" + fixed(mean_ssim, 4) + "\n";
  write_text(a.out / "report.txt", report);

  RunManifest run("evaluate", a.out);
  run.set_config({{"images", gen.images.size()}, {"real_images", real.images.size()}, {"is_splits", a.splits}});
  run.add_input("generated", a.generated);
  run.add_input("real", a.real);
  run.add_input("embedder", a.embedder);
  run.collect_outputs();
  run.finish();
  std::cout << report;
}

// ---- retrieve ------------------------------------------------------------

struct RetrieveArgs {
  fs::path queries, gallery, embedder, out;
  std::vector<Index> ks{10, 20};
  Index sheet_rows = 8;
  Index shuffles = 1000;
  bool force = false;
};

void cmd_retrieve(const RetrieveArgs& a) {
  if (a.embedder.empty()) throw usage("retrieve needs --embedder (create one with train-embedder)");
  for (Index k : a.ks)
    if (k < 1) throw usage("--k must be >= 1");
  const Embedder<float> e = load_embedder<float>(a.embedder);
  const std::string embedder_id = cli::sha256_file(a.embedder).substr(0, 16);
  const NamedImages queries = load_dir(a.queries, "retrieve");
  const NamedImages gallery_images = load_dir(a.gallery, "retrieve");
  const std::vector<Index> query_ids = identities_of(queries.names, "retrieve");
  cli::prepare_output_dir(a.out, a.force);

  const EmbeddingGallery gallery =
      build_gallery(e, gallery_images.images, identities_of(gallery_images.names, "retrieve"), gallery_images.names,
                    embedder_id);
  save_gallery(gallery, a.out / "gallery");
  const Index k_max = *std::max_element(a.ks.begin(), a.ks.end());
  const std::vector<RetrievalResult> results = query_all(gallery, embed_images(e, queries.images), k_max);
  const Relevance rel = identity_relevance(gallery, query_ids);

  std::ostringstream report;
  report << "# queries=" << queries.images.size() << " gallery=" << gallery.size() << " embedder=" << embedder_id
         << "\n";
  report << "row\trecall\tmAP\trandom_recall\n";
  for (Index k : a.ks)
    report << "Top-" << k << '\t' << fixed(recall_at_k(results, rel, k), 4) << '\t'
           << fixed(mean_average_precision(results, rel, k), 4) << '\t'
           << fixed(random_recall_baseline(gallery.size(), rel, k, a.shuffles, 1), 4) << '\n';
  write_text(a.out / "report.txt", report.str());

  std::ostringstream ranks;
  ranks << "query\trank\tgallery_row\tidentity_id\trelevant\tdistance\tpath\n";
  for (std::size_t q = 0; q < results.size(); ++q)
    for (std::size_t r = 0; r < results[q].ranked.size(); ++r) {
      const Match& m = results[q].ranked[r];
      ranks << queries.names[q] << '\t' << r + 1 << '\t' << m.row << '\t' << gallery.identities[m.row] << '\t'
            << (gallery.identities[m.row] == query_ids[q]) << '\t' << fixed(m.distance) << '\t'
            << gallery.paths[m.row] << '\n';
    }
  write_text(a.out / "rankings.tsv", ranks.str());

  if (a.sheet_rows > 0) {
    const std::size_t rows = std::min<std::size_t>(static_cast<std::size_t>(a.sheet_rows), results.size());
    const std::vector<RetrievalResult> shown(results.begin(), results.begin() + static_cast<std::ptrdiff_t>(rows));
    const Relevance shown_rel(rel.begin(), rel.begin() + static_cast<std::ptrdiff_t>(rows));
    const Image sheet = contact_sheet(std::span(queries.images).first(rows), shown, gallery_images.images, shown_rel,
                                      std::min<Index>(k_max, 10));
    save_image(sheet, a.out / "contact_sheet.png");
  }

  RunManifest run("retrieve", a.out);
  run.set_config({{"k", a.ks}, {"sheet_rows", a.sheet_rows}, {"baseline_shuffles", a.shuffles}});
  run.add_input("queries", a.queries);
  run.add_input("gallery", a.gallery);
  run.add_input("embedder", a.embedder);
  run.collect_outputs();
  run.finish();
  std::cout << report.str();
}

// ---- report --------------------------------------------------------------

struct ReportArgs {
  std::vector<fs::path> runs;
  fs::path out;
  bool force = false;
};

// One markdown table for evaluate runs and one for retrieve runs, labelled
// by run directory name.
void cmd_report(const ReportArgs& a) {
  std::ostringstream eval, retr;
  for (const fs::path& dir : a.runs) {
    const auto bad = cli::verify_run(dir);
    if (!bad.empty()) throw Error(ErrorKind::Format, "report", dir.string() + ": checksum mismatch for " + bad.front());
    std::ifstream mf(dir / RunManifest::kFileName);
    const std::string command = nlohmann::json::parse(mf).at("command").get<std::string>();
    const std::string label = dir.filename().empty() ? dir.parent_path().filename().string() : dir.filename().string();
    if (command == "evaluate") {
      std::ifstream f(dir / "metrics.json");
      const auto m = nlohmann::json::parse(f);
      eval << "| " << label << " | " << fixed(m.at("FID").get<double>(), 2) << " | "
           << fixed(m.at("IS").at("mean").get<double>(), 2) << " ± " << fixed(m.at("IS").at("std").get<double>(), 2)
           << " | " << fixed(m.at("SSIM").get<double>(), 3) << " |\n";
    } else if (command == "retrieve") {
      std::ifstream f(dir / "report.txt");
      std::string line;
      while (std::getline(f, line)) {
        if (line.rfind("Top-", 0) != 0) continue;
        std::istringstream s(line);
        std::string row, recall, map, baseline;
        s >> row >> recall >> map >> baseline;
        retr << "| " << label << " | " << row << " | " << recall << " | " << map << " | " << baseline << " |\n";
      }
    } else {
      throw Error(ErrorKind::InvalidArgument, "report", dir.string() + " is a " + command + " run (expected evaluate or retrieve)");
    }
  }
  cli::prepare_output_dir(a.out, a.force);
  std::ostringstream md;
  if (!eval.str().empty()) md << "| run | FID | IS | SSIM |\n|---|---|---|---|\n" << eval.str() << "\n";
  if (!retr.str().empty())
    md << "| run | k | recall | mAP | random recall |\n|---|---|---|---|---|\n" << retr.str();
  write_text(a.out / "report.md", md.str());

  RunManifest run("report", a.out);
  nlohmann::json inputs = nlohmann::json::array();
  for (std::size_t i = 0; i < a.runs.size(); ++i) run.add_input("run" + std::to_string(i), a.runs[i]);
  run.collect_outputs();
  run.finish();
  std::cout << md.str();
}

void print_error(ErrorKind kind, const std::string& message) {
  std::string line = message;
  std::replace(line.begin(), line.end(), '\n', ' ');
  std::cerr << "error:" << to_string(kind) << ": " << line << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Skull-to-face translation, evaluation and retrieval"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth-data", "Render the synthetic paired skull/face dataset");
  synth->add_option("--seed", sa.seed, "Root seed")->capture_default_str();
  synth->add_option("--identities", sa.identities, "Number of identities (two pairs each)")->capture_default_str();
  synth->add_option("--size", sa.size, "Image size in pixels")->capture_default_str();
  synth->add_option("--ratio", sa.ratio, "Training fraction of the pairs")->capture_default_str();
  synth->add_option("--out", sa.out, "Output directory")->required();
  synth->add_flag("--force", sa.force, "Replace a previous run in --out");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a translation model");
  train->add_option("--variant", ta.variant, "cyclegan, cgan, cut or fastcut (overrides the config file)");
  train->add_option("--data", ta.data, "Dataset directory from synth-data")->required();
  train->add_option("--config", ta.config, "key = value config file");
  train->add_option("--epochs", ta.epochs, "Override the configured epoch count");
  train->add_option("--seed", ta.seed, "Override the configured seed");
  train->add_option("--out", ta.out, "Output directory")->required();
  train->add_flag("--force", ta.force, "Replace a previous run in --out");

  GenerateArgs ga;
  auto* gen = app.add_subcommand("generate", "Translate skull images to faces");
  gen->add_option("--checkpoint", ga.checkpoint, "Checkpoint from train")->required();
  gen->add_option("--in", ga.in, "Directory of skull PNGs")->required();
  gen->add_option("--out", ga.out, "Output directory")->required();
  gen->add_flag("--force", ga.force, "Replace a previous run in --out");

  EmbedderArgs ea;
  auto* emb = app.add_subcommand("train-embedder", "Train the identity embedder used by evaluate and retrieve");
  emb->add_option("--faces", ea.faces, "Directory of face PNGs named with an id<N> token (e.g. the dataset gallery/)")
      ->required();
  emb->add_option("--epochs", ea.epochs, "Training epochs")->capture_default_str();
  emb->add_option("--seed", ea.seed, "Seed")->capture_default_str();
  emb->add_option("--out", ea.out, "Output directory")->required();
  emb->add_flag("--force", ea.force, "Replace a previous run in --out");

  EvaluateArgs va;
  auto* eval = app.add_subcommand("evaluate", "FID, IS and SSIM of generated faces against ground truth");
  eval->add_option("--generated", va.generated, "Directory of generated faces")->required();
  eval->add_option("--real", va.real, "Directory of ground-truth faces with matching file names")->required();
  eval->add_option("--embedder", va.embedder, "Embedder checkpoint (needed for FID and IS)");
  eval->add_option("--splits", va.splits, "Inception-score splits")->capture_default_str()->check(CLI::PositiveNumber);
  eval->add_option("--out", va.out, "Output directory")->required();
  eval->add_flag("--force", va.force, "Replace a previous run in --out");

  RetrieveArgs ra;
  auto* ret = app.add_subcommand("retrieve", "Match query faces against a gallery of real faces");
  ret->add_option("--query-dir", ra.queries, "Directory of query faces")->required();
  ret->add_option("--gallery", ra.gallery, "Directory of gallery faces")->required();
  ret->add_option("--embedder", ra.embedder, "Embedder checkpoint");
  ret->add_option("--k", ra.ks, "Cut-offs; repeat for several")->capture_default_str();
  ret->add_option("--sheet-rows", ra.sheet_rows, "Queries shown on the contact sheet (0 disables it)")
      ->capture_default_str();
  ret->add_option("--shuffles", ra.shuffles, "Random permutations for the baseline")->capture_default_str();
  ret->add_option("--out", ra.out, "Output directory")->required();
  ret->add_flag("--force", ra.force, "Replace a previous run in --out");

  ReportArgs pa;
  auto* rep = app.add_subcommand("report", "Tabulate evaluate and retrieve runs");
  rep->add_option("--run", pa.runs, "Run directory; repeat for several")->required();
  rep->add_option("--out", pa.out, "Output directory")->required();
  rep->add_flag("--force", pa.force, "Replace a previous run in --out");

  fs::path verify_dir;
  auto* ver = app.add_subcommand("verify", "Check a run directory against its run.json checksums");
  ver->add_option("dir", verify_dir, "Run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error(ErrorKind::Usage, e.what());
    return 2;
  }

  try {
    if (*synth) cmd_synth(sa);
    if (*train) cmd_train(ta);
    if (*gen) cmd_generate(ga);
    if (*emb) cmd_train_embedder(ea);
    if (*eval) cmd_evaluate(va);
    if (*ret) cmd_retrieve(ra);
    if (*rep) cmd_report(pa);
    if (*ver) {
      const auto bad = cli::verify_run(verify_dir);
      for (const auto& b : bad) std::cout << "MISMATCH\t" << b << '\n';
      if (!bad.empty()) {
        print_error(ErrorKind::Format, std::to_string(bad.size()) + " artifact(s) differ from run.json");
        return 1;
      }
      std::cout << "ok\n";
    }
  } catch (const Error& e) {
    print_error(e.kind(), e.what());
    return e.kind() == ErrorKind::Usage ? 2 : 1;
  } catch (const std::exception& e) {
    print_error(ErrorKind::State, e.what());
    return 1;
  }
  return 0;
}
