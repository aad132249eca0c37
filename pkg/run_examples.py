"""
Run fogpipe examples.

This script provides a menu of small demonstrations on synthetic data:
the full command-line pipeline, centralised versus federated training, and
GASF image export.
"""

import os
import sys
import subprocess
import tempfile
from pathlib import Path

import yaml

from fogpipe.core.federated import RoundConfig, partition_clients, run_rounds
from fogpipe.core.gaf import export_png, series_to_gaf, transform_window_set
from fogpipe.core.model import ModelConfig, train
from fogpipe.core.synthetic import synthetic_windows, write_synthetic_dataset

DEMO_CONFIG = {
    "repetitions": 1,
    "ingest": {"input_rate_hz": 128, "downsample_factor": 2},
    "windowing": {"window_len": 64},
    "gaf": {"image_size": 16},
    "model": {"channel_sets": [["AccV"], ["AccML"], ["AccAP"]], "epochs": 3, "batch_size": 32},
    "federated": {"num_clients": 2, "local_epochs": 1, "rounds": 2, "channels": ["AccV"]},
}


def clear_screen():
    """Clear the terminal screen."""
    os.system('cls' if os.name == 'nt' else 'clear')


def print_header():
    """Print the examples header."""
    clear_screen()
    print("=" * 60)
    print("               fogpipe Examples Runner               ")
    print("=" * 60)
    print()


def print_menu():
    """Print the examples menu."""
    print("Available examples:")
    print("  1. Command-line pipeline on synthetic recordings")
    print("  2. Centralised versus federated training")
    print("  3. GASF image export")
    print("  0. Exit")
    print()


def run_cli_pipeline():
    """Write synthetic recordings and run every subcommand on them."""
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        write_synthetic_dataset(root / "data", n_subjects=6, n_samples=4096, seed=7)
        config = dict(DEMO_CONFIG, paths={"data_dir": str(root / "data"), "out_dir": str(root / "out")})
        config_path = root / "fogpipe.yaml"
        config_path.write_text(yaml.safe_dump(config))

        base = [sys.executable, "-m", "fogpipe.core.cli", "--config", str(config_path)]
        for command in (["preprocess"], ["train"], ["federate"], ["evaluate"]):
            print(f"$ fogpipe {' '.join(command)}")
            subprocess.run(base + command, check=False)
            print()
    input("Press Enter to return to the menu...")


def run_training_comparison():
    """Train one single-channel model centrally and through three clients."""
    cfg = ModelConfig(channels=("AccV",), epochs=4, batch_size=32, image_size=16, seed=3)
    train_set = transform_window_set(synthetic_windows(600, seed=3, n_subjects=6), 16, channels=("AccV",))
    val_set = transform_window_set(synthetic_windows(200, seed=3, split="val"), 16, channels=("AccV",))

    central = train(cfg, train_set, val_set)
    print(f"Centralised: val accuracy {central.history[-1].val_accuracy:.3f}")

    shards = partition_clients(train_set, k=3, seed=cfg.seed)
    result = run_rounds(RoundConfig(num_clients=3, local_epochs=2, rounds=2, seed=cfg.seed), cfg, shards, val=val_set)
    print(f"Federated:   val F1 {result.history[-1].global_val_f1:.3f}")
    input("Press Enter to return to the menu...")


def run_gaf_export():
    """Export one window of each class as PNG into the current directory."""
    ws = synthetic_windows(20, window_len=256, seed=11)
    for label in (0, 1):
        w = next(w for w in ws if w.label == label)
        path = Path(f"gasf_class{label}.png")
        path.write_bytes(export_png(series_to_gaf(w.data["AccV"], 64)))
        print(f"Wrote {path}")
    input("Press Enter to return to the menu...")


def main():
    """Run the examples menu."""
    examples = {"1": run_cli_pipeline, "2": run_training_comparison, "3": run_gaf_export}
    while True:
        print_header()
        print_menu()
        choice = input("Select an example: ").strip()
        if choice == "0":
            break
        if choice in examples:
            examples[choice]()


if __name__ == "__main__":
    main()
