"""Forget a random fifth of a synthetic dataset and compare against retraining.

    python3 demos/quickstart.py
"""

import numpy as np

from cfunlearn import ScmSpec, TrainConfig, Uniform, UnlearnConfig, generate_scm_dataset, init_model, make_deletion
from cfunlearn import split_train_test, train_baseline, unlearn
from cfunlearn.evaluation import evaluate_model, retrain_baseline

ds = generate_scm_dataset(ScmSpec(samples=2000), seed=0)
train, test = split_train_test(ds, 0.2, seed=0)
cfg = TrainConfig(learning_rate=1e-3, epochs=60, seed=0)
teacher = train_baseline(init_model(train.num_features, [64, 64], train.num_classes, 0), train, cfg)

part = make_deletion(train, Uniform(0.2), seed=0)
res = unlearn(teacher, train, part, UnlearnConfig(learning_rate=3e-3, epochs=20))
oracle = retrain_baseline(train, part, [64, 64], cfg, seed=1)

for name, model in (("teacher", teacher), ("ours", res.student), ("retrain", oracle)):
    r = evaluate_model(model, train, test, part, method=name, scenario="uniform(p=0.2)", seed=0)
    print(f"{name:8s} RA={r.ra:.3f} FA={r.fa:.3f} MIA={r.mia:.3f} test={r.test_accuracy:.3f}")

print("unlearning took", res.rte_seconds, "s;", len(res.forget_set.not_found), "forget rows had no counterfactual")
print("last epoch losses:", {k: round(v, 4) for k, v in res.log[-1].items() if k != "epoch"})
print("median counterfactual cost:", np.median([cf.l2_cost for cf in res.forget_set.counterfactuals]))
