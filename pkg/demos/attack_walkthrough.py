"""Walkthrough: train a small classifier, fool it with one perturbation.

Renders a compact imbalanced digit corpus, trains the stock CNN, grows a
nontargeted universal perturbation on the training split, and compares it
against a norm-matched random control. Outputs (checkpoint, UAPF file,
reports, confusion CSVs, perturbation image) land in demos/out_attack/.

Run:  python demos/attack_walkthrough.py        (~2-3 minutes)
"""

import json
import math
from pathlib import Path

import numpy as np

from uapkit import (AttackParams, Network, accuracy, conv2d, dense,
                    evaluate, flatten, fooling_rate, generate_uap,
                    maxpool2d, random_uap, resolve_budget, softmax)
from uapkit.data_io import (apply_and_export, export_perturbation_image,
                            load_dataset, load_manifest)
from uapkit.digits import write_corpus

OUT = Path(__file__).parent / "out_attack"
SEED = 7

print("[1/5] Rendering a 3-class digit corpus (minority class ~2%)...")
train_manifest, test_manifest = write_corpus(
    OUT / "corpus", train_counts=(900, 900, 200), test_counts=(130, 130, 40),
    caps={"eight": 36}, seed=SEED)
train = load_dataset(load_manifest(train_manifest))
test = load_dataset(load_manifest(test_manifest))
print(f"      train: {dict(zip(train.class_names, train.class_counts()))}")
print(f"      test:  {dict(zip(test.class_names, test.class_counts()))}")

print("[2/5] Training the classifier (8 epochs)...")
net = Network([conv2d(8, 3), maxpool2d(2), flatten(), dense(3), softmax()],
              train.images.shape[1:], seed=SEED)
net.train(train, epochs=8, lr=0.05, batch_size=32, seed=SEED)
print(f"      train accuracy {accuracy(net, train):.3f}, "
      f"test accuracy {accuracy(net, test):.3f}")

print("[3/5] Resolving the perturbation budget (10% of mean image norm)...")
budget = resolve_budget(0.10, train, math.inf)
print(f"      L-inf radius xi = {budget.xi:.2f} pixel units")

print("[4/5] Growing the universal perturbation (15 passes)...")
uap = generate_uap(net, train, budget,
                   AttackParams(eps=0.001, i_max=15, seed=SEED))
control = random_uap(net.input_shape, budget.p, budget.xi, seed=SEED)

report = evaluate(net, test, uap)
rf_uap = report.metric_value
rf_control = fooling_rate(net, test, control)
print(f"      fooling rate on test: UAP {rf_uap:.1%} vs "
      f"random control {rf_control:.1%}")
print(f"      dominant predicted label under attack: {report.dominant_label}")
print("      confusion (rows actual, columns predicted):")
for name, row in zip(test.class_names, report.confusion):
    print(f"        {name:>6}: {list(row)}")

print("[5/5] Exporting artifacts...")
export_perturbation_image(uap, OUT / "uap.png")
x = test.images[0]
apply_and_export(x, uap, OUT / "adversarial_example.png")
with open(OUT / "summary.json", "w") as fh:
    json.dump({"xi": budget.xi, "fooling_rate_uap": rf_uap,
               "fooling_rate_random": rf_control,
               "dominant_label": report.dominant_label}, fh, indent=2)
print(f"      wrote {OUT}/uap.png, adversarial_example.png, summary.json")
