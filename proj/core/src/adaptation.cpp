// SPDX-License-Identifier: Apache-2.0
#include "pemma/adaptation.hpp"

#include <algorithm>
#include <iomanip>
#include <sstream>

#include "pemma/ehr.hpp"

namespace pemma {

ParamLedger ledger_for_geometry(const ModelGeometry& geo, const VariantSpec& variant) {
  geo.validate();
  ParamLedger ledger;
  const bool base_train = !variant.base_frozen;
  auto add = [&ledger](std::string name, std::vector<int> shape, ParamGroup g, bool train) {
    ledger.rows.push_back({std::move(name), std::move(shape), g, train});
  };

  const int c_in = (variant.kind == ModelKind::early_fusion) ? 2 : 1;
  const int d = geo.dim;
  const int c = geo.decoder_channels;
  add("embed.ct.weight", {d, geo.patch_volume() * c_in}, ParamGroup::base, base_train);
  add("embed.ct.bias", {d}, ParamGroup::base, base_train);
  add("embed.ct.pos", {geo.tokens_per_modality(), d}, ParamGroup::base, base_train);
  for (int i = 0; i < geo.blocks; ++i) {
    const std::string p = "enc.block" + std::to_string(i) + ".";
    add(p + "attn.wq", {d, d}, ParamGroup::base, base_train);
    add(p + "attn.wk", {d, d}, ParamGroup::base, base_train);
    add(p + "attn.wv", {d, d}, ParamGroup::base, base_train);
    add(p + "attn.wo", {d, d}, ParamGroup::base, base_train);
    add(p + "mlp.w1", {geo.mlp_ratio * d, d}, ParamGroup::base, base_train);
    add(p + "mlp.w2", {d, geo.mlp_ratio * d}, ParamGroup::base, base_train);
    add(p + "ln1.gamma", {d}, ParamGroup::base, base_train);
    add(p + "ln1.beta", {d}, ParamGroup::base, base_train);
    add(p + "ln2.gamma", {d}, ParamGroup::base, base_train);
    add(p + "ln2.beta", {d}, ParamGroup::base, base_train);
  }
  add("skip.ct.weight", {c, c_in}, ParamGroup::base, base_train);
  add("skip.ct.bias", {c}, ParamGroup::base, base_train);
  for (int k = 0; k < 4; ++k) {
    add("dec.tap" + std::to_string(k) + ".weight", {8 * c, d}, ParamGroup::base, base_train);
    add("dec.tap" + std::to_string(k) + ".bias", {8 * c}, ParamGroup::base, base_train);
  }
  for (int s = 0; s < geo.upsample_stages(); ++s) {
    add("dec.mix" + std::to_string(s) + ".weight", {c, c}, ParamGroup::base, base_train);
    add("dec.mix" + std::to_string(s) + ".bias", {c}, ParamGroup::base, base_train);
  }
  add("dec.fuse.weight", {c, 2 * c}, ParamGroup::base, base_train);
  add("dec.fuse.bias", {c}, ParamGroup::base, base_train);
  add("dec.cls.weight", {geo.classes, c}, ParamGroup::base, base_train);
  add("dec.cls.bias", {geo.classes}, ParamGroup::base, base_train);

  if (variant.multimodal) {
    add("embed.pet.weight", {d, geo.patch_volume()}, ParamGroup::pe_pet, true);
    add("embed.pet.bias", {d}, ParamGroup::pe_pet, true);
    add("embed.pet.pos", {geo.tokens_per_modality(), d}, ParamGroup::pe_pet, true);
    add("skip.pet.weight", {c, 1}, ParamGroup::sk_pet, true);
    add("skip.pet.bias", {c}, ParamGroup::sk_pet, true);
    add("skip.beta", {1}, ParamGroup::sk_pet, true);
    add("adapter.weight", {2, 1}, ParamGroup::adapter, true);
    add("adapter.bias", {2}, ParamGroup::adapter, true);
  }

  if (variant.adapt.method != AdaptMethod::none) {
    variant.adapt.validate();
    const bool with_m = variant.adapt.method == AdaptMethod::dora &&
                        variant.adapt.dora_form == DoraForm::canonical;
    for (int i = 0; i < geo.blocks; ++i) {
      const std::string p = "peft.block" + std::to_string(i) + ".";
      for (AttnTarget t : {AttnTarget::q, AttnTarget::k, AttnTarget::v, AttnTarget::o}) {
        const bool selected = std::find(variant.adapt.targets.begin(), variant.adapt.targets.end(),
                                        t) != variant.adapt.targets.end();
        if (!selected) continue;
        static const char* tn[] = {"q", "k", "v", "o"};
        const std::string q = p + tn[static_cast<int>(t)] + ".";
        add(q + "a", {variant.adapt.rank, d}, ParamGroup::peft, true);
        add(q + "b", {d, variant.adapt.rank}, ParamGroup::peft, true);
        if (with_m) add(q + "m", {d}, ParamGroup::peft, true);
      }
    }
  }

  if (variant.with_prognosis) {
    const int in = variant.prognosis_in > 0 ? variant.prognosis_in : d + ehr_feature_dim();
    add("prog.w1", {variant.prognosis_hidden, in}, ParamGroup::head, true);
    add("prog.b1", {variant.prognosis_hidden}, ParamGroup::head, true);
    add("prog.w2", {variant.prognosis_bins, variant.prognosis_hidden}, ParamGroup::head, true);
    add("prog.b2", {variant.prognosis_bins}, ParamGroup::head, true);
  }
  return ledger;
}

std::string param_report(const ParamLedger& ledger) {
  long long group_total[7] = {0};
  long long group_train[7] = {0};
  for (const auto& r : ledger.rows) {
    const int g = static_cast<int>(r.group);
    group_total[g] += r.count();
    if (r.trainable) group_train[g] += r.count();
  }
  std::ostringstream os;
  os << std::left << std::setw(10) << "group" << std::right << std::setw(12) << "params"
     << std::setw(12) << "trainable" << "\n";
  for (int g = 0; g < 7; ++g) {
    if (group_total[g] == 0) continue;
    os << std::left << std::setw(10) << param_group_name(static_cast<ParamGroup>(g)) << std::right
       << std::setw(12) << group_total[g] << std::setw(12) << group_train[g] << "\n";
  }
  os << std::left << std::setw(10) << "total" << std::right << std::setw(12) << ledger.total()
     << std::setw(12) << ledger.trainable() << "\n";
  os << "trainable fraction: " << std::setprecision(6) << ledger.trainable_fraction() << "\n";
  return os.str();
}

}  // namespace pemma
