"""
Pretrain alone, fine-tune together
==================================

A small version of the full study: simulate scenes, pretrain one model
per sensor, merge them by product of experts, fine-tune on aligned data
and score a beam classifier with and without each sensor.
Runs in about a minute.
"""

from dataclasses import replace

import numpy as np

from vibeam.fusion import LatentConfig
from vibeam.metrics import dba_score
from vibeam.pipeline import split_episodes
from vibeam.scene import SceneConfig, simulate
from vibeam.task import TaskConfig, episode_features, train_head
from vibeam.trainer import (TrainConfig, finetune_multimodal, init_from_experts,
                            pretrain_unimodal)

data = simulate(SceneConfig(episodes=800, seed=1))
train, test = split_episodes(data.episodes, 0.2, seed=1)
latent = LatentConfig(d_s=8, d_p=8, d_h=16, hidden=128)
cfg = TrainConfig(epochs_pretrain=6, epochs_finetune=6, seed=1)

experts = [pretrain_unimodal(data, m, latent, cfg, train)[0] for m in data.names]
print("pretrained experts:", [ck.stage for ck in experts])


def score(model, label):
    head, _ = train_head(episode_features(model, data, train), data.labels[train],
                         TaskConfig(epochs=30), seed=1)
    for drop in [(), ("radar-cube",), ("position", "radar-cube")]:
        preds = head.predict_beam(episode_features(model, data, test, drop=drop))
        dba = dba_score(preds, data.labels[test])[3]
        print(f"  {label:10s} hidden={'+'.join(drop) or 'none':22s} DBA {dba:.3f}")


score(init_from_experts(experts, seed=1), "unaligned")
model = init_from_experts(experts, seed=1)
_, rows = finetune_multimodal(data, model, cfg, train)
print(f"reg_enc {rows[0]['reg_enc']:.1f} -> {rows[-1]['reg_enc']:.2f}")
score(model, "fine-tuned")
