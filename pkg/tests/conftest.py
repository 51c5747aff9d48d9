import csv
import os
from pathlib import Path

import pytest
import torch

torch.set_num_threads(min(4, os.cpu_count() or 1))

DATA_DIR = Path(__file__).parent / "data"


def read_csv_rows(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def printed_quantum(text: str) -> float:
    """Resolution of a printed decimal value, e.g. '0.002' -> 0.001."""
    if "." not in text:
        return 1.0
    return 10.0 ** -len(text.split(".")[1])


def matches_printed(computed: float, printed: str, rel: float = 0.02) -> bool:
    """Printed reference values are rounded to a fixed number of decimals, so
    accept either the relative tolerance or twice the print resolution."""
    target = float(printed)
    diff = abs(computed - target)
    return diff <= rel * abs(target) or diff <= 2.0 * printed_quantum(printed)


@pytest.fixture(scope="session")
def resnet50():
    from spikesplit.arch import build_arch

    return build_arch("resnet50")


@pytest.fixture(scope="session")
def mobilenetv1():
    from spikesplit.arch import build_arch

    return build_arch("mobilenetv1")


@pytest.fixture(scope="session")
def two_step_result():
    """One shared run of the two-step toy training (it is the slow part)."""
    from spikesplit.trainer import ToyTaskSpec, train_two_step

    return train_two_step(ToyTaskSpec())
