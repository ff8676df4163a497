"""Toy run of the noise-encoder variant.

A generator learns capped additive noise against a RecNet adversary; a student RecNet is
then distilled on the noised features from a clean-feature teacher. A black-box attacker
that can only query the feature generator trains a surrogate and tries to match victims.

    python3 demos/02_noise_encoder.py
"""
import numpy as np

from xnn.attacks import blackbox_surrogate_attack, reference_gallery
from xnn.data import SynthConfig, concat, generate_synthetic_identities, split_by_identity
from xnn.models import ExtNetConfig, RecNetConfig, TrainConfig, ext_forward, freeze, pretrain_ext, train_classifier
from xnn.xnnd import (DistillConfig, NoiseGenConfig, distill_recnet, eval_xnnd, feature_generator,
                      train_noise_generator, with_layer_norm_tail)

ECFG = ExtNetConfig(image_size=16, patch_size=4, embed_dim=32, num_blocks=2, num_heads=4)
TCFG = TrainConfig(epochs=8, batch_size=32)

owner = generate_synthetic_identities(SynthConfig(30, 16, image_size=16, seed=11))
public = generate_synthetic_identities(SynthConfig(30, 16, image_size=16, seed=12), role="public")
attacker = generate_synthetic_identities(SynthConfig(15, 8, image_size=16, seed=13), role="attacker")
train, test = split_by_identity(owner, test_ids=8, test_images_per_id=12, seed=0)

ext = with_layer_norm_tail(pretrain_ext(public, ECFG, TCFG))
f_train = ext_forward(train.images, ext)
rcfg = RecNetConfig(embed_dim=32, num_blocks=2, num_classes=train.num_ids, num_heads=4, embedding_dim=32)
teacher = freeze(train_classifier(f_train, train.labels, rcfg, TCFG).model)

gcfg = NoiseGenConfig.like(ECFG, beta=3.0)
gen, adv, hist = train_noise_generator(train, ext, gcfg, teacher, TrainConfig(epochs=16, batch_size=32),
                                       gen_lr=0.2, features=f_train, adv_reset_every=2)
print("adversary accuracy per epoch", np.round(hist["adv_acc"], 2))
print("largest noise/feature norm ratio", round(max(hist["noise_ratio"]), 3), "cap", gcfg.mix_alpha * gcfg.beta)

student = distill_recnet(train, ext, gen, teacher, rcfg, DistillConfig(epochs=16), TCFG, features=f_train)

ids, ref, rest = reference_gallery(test, seed=0)
gallery_ds = concat([attacker, test.subset(ref)], role="attacker")
probe_ids = np.asarray(test.names)[test.labels[rest]]
for name, g, model in [("clean features", None, teacher), ("noise encoder", gen, student.model)]:
    fg = feature_generator(ext, g)
    rep = blackbox_surrogate_attack(fg, gallery_ds, rcfg, TCFG, fg(test.images[rest]), probe_ids, seed=1)
    u = eval_xnnd(test, ext, g, model)["utility"]
    print(f"{name}: utility {u:.2f}, black-box ASR {rep.leak:.2f} (chance {rep.chance:.3f}, {rep.queries} queries)")
