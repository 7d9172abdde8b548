"""Synthetic longitudinal blood-pressure data bundled with the package.

The real clinic data behind the published example are not public. This
generator produces a dataset of the same shape (patients with repeated
systolic/diastolic readings, dichotomised into controlled/uncontrolled) so
the CLI has something realistic to run on.
"""
from __future__ import annotations

import csv
from importlib import resources

import numpy as np

from .data import CsvSchema, dichotomize_bp, load_long_csv

EXAMPLE_FILE = "example_bp.csv"
EXAMPLE_SCHEMA = CsvSchema(
    subject="patient",
    outcome="uncontrolled",
    fixed=("time", "age", "black", "female"),
)


def make_bp_example(stream, n_patients=150, seed=2008):
    rng = np.random.default_rng(seed)
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["patient", "time", "age", "black", "female", "sbp", "dbp", "uncontrolled"])
    for pid in range(1, n_patients + 1):
        visits = int(rng.integers(4, 11))
        age = round(float(rng.normal(0.0, 1.2)), 2)  # decades from 55
        black = int(rng.random() < 0.45)
        female = int(rng.random() < 0.6)
        level = rng.normal(0.0, 9.0)
        times = np.sort(rng.uniform(0.0, 2.0, visits))
        for t in times:
            sbp = 134 + 4.0 * black + 3.0 * age - 1.5 * t + level + rng.normal(0.0, 11.0)
            dbp = 80 + 2.0 * black - 1.0 * age + 0.4 * level + rng.normal(0.0, 7.0)
            sbp, dbp = round(sbp, 1), round(dbp, 1)
            writer.writerow(
                [f"P{pid:03d}", round(float(t), 3), age, black, female, sbp, dbp,
                 dichotomize_bp(sbp, dbp)]
            )


def example_path():
    return resources.files("glmmr2") / "datasets" / EXAMPLE_FILE


def load_example():
    with example_path().open("rb") as fh:
        return load_long_csv(fh, EXAMPLE_SCHEMA)
