#include "metapoison/json_io.hpp"

namespace metapoison {

void to_json(nlohmann::json& j, const ArchSpec& arch) {
  j = {{"kind", arch_kind_name(arch.kind)},
       {"hidden", arch.hidden},
       {"conv_channels", arch.conv_channels},
       {"dense_width", arch.dense_width},
       {"height", arch.height},
       {"width", arch.width},
       {"channels", arch.channels},
       {"num_classes", arch.num_classes}};
}

void from_json(const nlohmann::json& j, ArchSpec& arch) {
  ArchSpec out;
  if (j.contains("kind")) out.kind = parse_arch_kind(j.at("kind").get<std::string>());
  if (j.contains("hidden")) out.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  if (j.contains("conv_channels")) out.conv_channels = j.at("conv_channels").get<std::vector<std::size_t>>();
  if (j.contains("dense_width")) out.dense_width = j.at("dense_width").get<std::size_t>();
  if (j.contains("height")) out.height = j.at("height").get<std::size_t>();
  if (j.contains("width")) out.width = j.at("width").get<std::size_t>();
  if (j.contains("channels")) out.channels = j.at("channels").get<std::size_t>();
  if (j.contains("num_classes")) out.num_classes = j.at("num_classes").get<std::size_t>();
  out.validate();
  arch = out;
}

}  // namespace metapoison
