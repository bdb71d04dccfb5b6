"""Desk-scale tuning experiment: pretrain + rotated-test probe. Dev only."""
import sys
import time

import numpy as np

from isoshape.config import RunConfig
from isoshape.contrastive import pretrain
from isoshape.evaluation import evaluate_probe, extract_embeddings, invariance_score, train_probe
from isoshape.geometry import normalize
from isoshape.nn import ContrastiveEncoder
from isoshape.numkit import Rng
from isoshape.pipeline import build_datasets, desk_profile
from isoshape.transforms import AugmentationChoice, apply_augmentation
from dataclasses import replace

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 7
lr = float(sys.argv[2]) if len(sys.argv) > 2 else 0.075
mom = float(sys.argv[3]) if len(sys.argv) > 3 else 0.999
epochs = int(sys.argv[4]) if len(sys.argv) > 4 else 120
batch = int(sys.argv[5]) if len(sys.argv) > 5 else 32
aug = sys.argv[6].split(";") if len(sys.argv) > 6 else ["orthogonal", "rip(delta=0.9,N=1000,T=3)"]

cfg = replace(desk_profile(seed), aug=tuple(aug), base_lr=lr, key_momentum=mom,
              max_epochs=epochs, batch_size=batch)
t0 = time.time()
train, test = build_datasets(cfg)
print(f"dataset: {len(train)} train / {len(test)} test, {cfg.points_per_cloud} pts")

state, metrics = pretrain(train, cfg.augmentation_spec(), cfg.pretrain_config(),
                          Rng(cfg.seed).child("pretrain"))
for m in metrics[:: max(1, len(metrics) // 8)] + [metrics[-1]]:
    print(f"  epoch {m['epoch']:3d} lr {m['lr']:.4f} loss {m['mean_loss']:.4f} acc {m['inst_disc_acc']:.3f}")
t_train = time.time() - t0
print(f"pretrain: {len(metrics)} epochs in {t_train:.0f}s")

rng = Rng(cfg.seed).child("test-transform")
choice = AugmentationChoice("orthogonal")
transform = lambda c: normalize(apply_augmentation(choice, c, rng), cfg.normalize_mode)
e_train, y_train = extract_embeddings(state.query, train)
e_test, y_test = extract_embeddings(state.query, test, transform)
probe = train_probe(e_train, y_train, cfg.probe_config(), Rng(cfg.seed).child("probe"))
acc, conf = evaluate_probe(probe, e_test, y_test)
print(f"rotated-test probe accuracy: {acc:.4f} (lr {probe.chosen_lr}, val {probe.val_accuracy:.3f})")
print(conf)

inv = invariance_score(state.query, test, "orthogonal", trials=2, rng=Rng(seed).child("inv"))
untrained = ContrastiveEncoder(cfg.encoder_config(), Rng(seed).child("pretrain").child("init"))
inv0 = invariance_score(untrained, test, "orthogonal", trials=2, rng=Rng(seed).child("inv"))
print(f"invariance trained={inv:.4f} untrained={inv0:.4f}")
print(f"TOTAL {time.time()-t0:.0f}s")
