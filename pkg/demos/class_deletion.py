"""Delete one class and see where its samples go.

A retrained model sends most deleted-class samples to a sibling class of the
same concept; this prints that redistribution for each method.

    python3 demos/class_deletion.py
"""

from cfunlearn.evaluation import run_experiment, summarize

config = {
    "dataset": {"scm": {"samples": 3000}},
    "scenarios": [{"kind": "full_class", "classes": [0]}],
    "methods": ["ours", "retrain", "naive-finetune"],
    "train": {"learning_rate": 1e-3, "epochs": 60},
    "unlearn": {"learning_rate": 3e-3, "epochs": 20},
    "repetitions": 2,
}

reports = run_experiment(config)
for metric in ("ra", "fa", "redistribution", "rte_seconds"):
    row = summarize(reports, metric)
    print(f"{metric:15s}", "  ".join(f"{m}={v:.3f}" for (_, m), v in sorted(row.items())))
