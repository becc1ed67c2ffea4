#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "cranio/image.hpp"

namespace cranio {

// Child seed for a (tag, index) stream of a root seed.
std::uint64_t derive_seed(std::uint64_t root, std::uint64_t tag, std::uint64_t index = 0);

enum class View { Frontal, Lateral };
const char* to_string(View v);
View parse_view(const std::string& s);

// Head geometry behind both renderings of one identity. Lengths are in
// normalized image coordinates ([-1, 1] across the frame).
struct FaceGeometry {
  double head_width, head_height;  // half-axes of the cranium ellipse
  double jaw_taper;                // lower-face width factor at the chin
  double eye_spacing, eye_height, eye_radius;
  double nose_length, nose_width;
  double mouth_width, mouth_gap;   // mouth line sits mouth_gap below the nose tip
  double asymmetry;                // vertical offset between left and right eye

  static constexpr std::size_t kDims = 11;
  // Each field rescaled to [0, 1] over its sampling range.
  std::array<double, kDims> normalized() const;
  bool valid() const;
};

// Rejection-samples until the geometry is valid.
FaceGeometry sample_geometry(std::mt19937_64& rng);
// Small per-rendering perturbation (pose and proportion noise) of a geometry.
FaceGeometry jitter_geometry(const FaceGeometry& g, std::mt19937_64& rng);

// Bone-like X-ray proxy on black: bright cranial rim, dark orbits and nasal
// aperture, a row of teeth.
Image render_skull(const FaceGeometry& g, View view, Index size);
// Shaded face on a light backdrop: skin, hair band, brows, eyes, nose, lips.
Image render_face(const FaceGeometry& g, View view, Index size);

struct ImagePair {
  Image skull;
  Image face;
  Index identity = 0;
  View view = View::Frontal;
  std::string provenance = "original";  // or "augmented:<kind>"
  Index source = 0;                     // index of the original pair
};

struct SynthResult {
  std::vector<ImagePair> pairs;
  std::vector<FaceGeometry> geometry;  // per identity
};

// Two pairs (frontal, lateral) per identity, identities 0..n-1.
SynthResult synth_generate(std::uint64_t seed, Index n_identities, Index image_size);

// Original plus one flip, rotation, colour jitter and affine variant of every
// pair. Geometric transforms hit both images alike; jitter touches the face only.
std::vector<ImagePair> augment(const std::vector<ImagePair>& pairs, std::uint64_t seed);
constexpr Index kAugmentationFactor = 5;

Image flip_horizontal(const Image& img);
// Inverse-mapped bilinear warp about the image centre with edge clamping:
// rotation in degrees, isotropic scale, translation as a fraction of size.
Image warp_affine(const Image& img, double degrees, double scale, double shift_x, double shift_y);
Image colour_jitter(const Image& img, double brightness, double contrast);

struct Split {
  std::vector<ImagePair> train;
  std::vector<ImagePair> test;
};
// Pair-level random split; round(ratio * n) pairs go to train, clamped so both
// sides are non-empty.
Split split_pairs(std::vector<ImagePair> pairs, double ratio, std::uint64_t seed);

struct ManifestRecord {
  std::string path_skull, path_face;
  Index identity = 0;
  View view = View::Frontal;
  std::string split;
  std::string provenance;
  Index source = 0;
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  Index identities = 0;
  Index image_size = 0;
  Index augmentation_factor = kAugmentationFactor;
  double ratio = 0.8;
  std::vector<ManifestRecord> records;
};

struct DatasetOptions {
  std::uint64_t seed = 7;
  Index identities = 51;
  Index image_size = 64;
  double ratio = 0.8;
};

struct Dataset {
  DatasetOptions options;
  Index original_pairs = 0;
  std::vector<ImagePair> train;  // augmented
  std::vector<ImagePair> test;
  std::vector<ImagePair> originals;  // every un-augmented pair, both splits
};

// synth_generate, then split, then augment the train side only.
Dataset build_dataset(const DatasetOptions& options);

// Layout: manifest.tsv, {train,test}/{skull,face}/*.png and gallery/*.png
// (every original face). Returns the manifest written.
DatasetManifest write_dataset(const Dataset& data, const std::filesystem::path& dir);
DatasetManifest read_manifest(const std::filesystem::path& dir);
// Loads the pairs of one split ("train" or "test") with paths resolved
// against dir.
std::vector<ImagePair> load_split(const std::filesystem::path& dir, const DatasetManifest& manifest,
                                  const std::string& split);

// File stem convention p<source>_id<identity>_<view>[_<kind>].
std::string pair_stem(const ImagePair& p);
// Identity parsed from the "id<N>" token of a file name; -1 when absent.
Index identity_from_name(const std::string& name);

}  // namespace cranio
