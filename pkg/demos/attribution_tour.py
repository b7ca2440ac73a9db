"""Why did this layout get that score?

Builds a small planted world where the label is known to be
2 * pin clustering - 1 * macro boundary pressure, trains the scoring
model on two hand-picked features, and then takes one held-out sample
apart: the exact contribution decomposition, a what-if push on the
dominant feature, and the pairwise consistency check.

Run: python3 demos/attribution_tour.py
"""

import numpy as np

from mllma import layout
from mllma.featdsl import FeatureTable
from mllma.layout import SynthConfig, synth_dataset
from mllma.prefmodel import (
    GatePolicy,
    PrefConfig,
    attribution,
    consistency_rate,
    train,
    whatif,
)


def main():
    data = synth_dataset(SynthConfig(
        n_samples=250, height=32, width=32,
        alpha=0.0, beta=2.0, gamma=1.0, noise_sigma=0.05, rng_seed=1))

    # two features, one per planted term
    pin = np.array([
        layout.topk_mean(layout.pin_cluster_density(s.rudy_pin.data), 20)
        for s in data
    ])
    bnd = np.array([
        layout.macro_boundary_mean(s.macro.data, s.rudy.data) for s in data
    ])
    rows = np.column_stack([pin, bnd])
    raw = np.array([s.label for s in data])

    train_n = 150
    y = (raw[:train_n] - raw[:train_n].mean()) / raw[:train_n].std()
    table = FeatureTable(["pin_cluster", "macro_boundary"],
                         [s.id for s in data[:train_n]], rows[:train_n], y)
    model = train(data[:train_n], table, PrefConfig(epochs=150, rng_seed=0))

    held = 200                       # a sample the model never saw
    att = attribution(model, data[held], feature_row=rows[held])
    print(f"sample {data[held].id} (held out), score {att.score:+.3f}")
    print(f"{'feature':<16} {'raw':>8} {'norm':>7} {'weight':>8} {'contrib':>8}")
    for it in att.items:
        print(f"{it.name:<16} {it.raw:8.3f} {it.normalized:7.2f} "
              f"{it.weight:+8.3f} {it.contribution:+8.3f}")
    total = sum(it.contribution for it in att.items)
    print(f"contributions sum to {total:+.3f} == score, no intercept\n")

    # the model learned the planted signs: pin hurts, boundary helps
    top = max(att.items, key=lambda it: it.contribution if it.weight > 0
              else -np.inf)
    sigma = rows[:train_n].std(axis=0)
    j = model.feature_names.index(top.name)
    report = whatif(model, data[held], {top.name: top.raw - sigma[j]},
                    feature_row=rows[held], policy=GatePolicy.FROZEN_GATING)
    print(f"what if {top.name} dropped one training sigma "
          f"({top.raw:.3f} -> {top.raw - sigma[j]:.3f})?")
    print(f"  score {report.score_before:+.3f} -> {report.score_after:+.3f} "
          f"(delta {report.delta:+.3f})")
    print("  frozen gating keeps the weights, so a positively weighted "
          "feature moving down always moves the score down\n")

    cons = consistency_rate(model, data[:train_n], table)
    print(f"pairwise ranking consistency on the training split: "
          f"{cons.rate:.3f} over {cons.n_pairs} pairs")


if __name__ == "__main__":
    main()
