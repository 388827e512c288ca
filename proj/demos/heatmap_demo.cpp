// Renders class attention maps of an untrained (seeded) model over one
// synthetic image — a quick visual check of the CAM plumbing.
#include <filesystem>
#include <iostream>

#include "eac/analysis.hpp"
#include "eac/synth.hpp"

int main() {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "eac_demo";
  fs::create_directories(dir);

  eac::SynthSpec spec;
  spec.count = 10;
  spec.seed = 21;
  const eac::Dataset<float> ds = eac::make_synthetic_dataset<float>(spec);

  eac::BackboneConfig arch;
  eac::Model<float> model(arch, ds.classes, true, 42);
  for (int i = 0; i < 3; ++i) {
    const auto& sample = ds.samples[std::size_t(i)];
    const fs::path out = dir / eac::msg("demo_heatmap_", sample.id, ".png");
    eac::export_cam_heatmap(model, sample.pixels, eac::kHeatmapPredicted, out);
    std::cout << "class " << sample.true_label << " -> " << out << "\n";
  }
  return 0;
}
