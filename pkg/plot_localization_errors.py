# plot_localization_errors.py

import argparse
import sys
from pathlib import Path

import pandas as pd

from src.utils import DIAGNOSTIC_COLUMNS, plot_error_traces


def get_file_path_from_arg(path_str, file_desc):
    file_path = Path(path_str).resolve()
    if not file_path.is_file():
        print(f"Error: {file_desc} file not found: '{path_str}'")
        sys.exit(1)
    return file_path


def main():
    parser = argparse.ArgumentParser(description="Plot longitudinal, lateral and heading error traces of localization runs.")
    parser.add_argument("diagnostics", nargs="+", help="One or more diagnostics CSV files written by 'main.py localize'.")
    parser.add_argument("-o", "--output", default="localization_errors.png", help="Output image path.")
    parser.add_argument("-l", "--labels", nargs="+", help="Legend label per file (defaults to the file names).")
    args = parser.parse_args()

    frames = []
    for path_str in args.diagnostics:
        path = get_file_path_from_arg(path_str, "Diagnostics")
        df = pd.read_csv(path)
        missing = [col for col in DIAGNOSTIC_COLUMNS if col not in df.columns]
        if missing:
            print(f"Error: {path} is missing columns: {', '.join(missing)}")
            sys.exit(1)
        frames.append(df)

    labels = args.labels or [Path(p).stem for p in args.diagnostics]
    if len(labels) != len(frames):
        print("Error: give one label per diagnostics file.")
        sys.exit(1)

    plot_error_traces(frames, args.output, labels=labels)
    print(f"Saved error traces to '{args.output}'")


if __name__ == "__main__":
    main()
