# src/99_export_results_workbook.py
#
# This script gathers the result tables of a run directory into a single Excel workbook
# for review.
#
# Rationale:
#   Ablation grids, evaluation metrics and training histories are spread over many small
#   files; one scannable workbook makes comparing runs quick.
#
# Key operations:
#   - Find ablation_*.parquet, *.jsonl reports and *_losses.csv / *_history.csv tables
#     under --results (recursively)
#   - Write one sheet per artifact with a formatted header, frozen top row and number formats
#
# Output:
#   1. <out>.xlsx
#
# Notes:
#   - Excel sheet names are limited to 31 chars; names are truncated (and de-duplicated).
#   - Missing artifact kinds are skipped; an empty results directory writes nothing.


import os
import sys
import pandas as pd
from openpyxl.styles import Alignment, Border, Font, PatternFill, Side
from openpyxl.utils import get_column_letter

from errors import DataError
from eval_harness import read_report_jsonl

HEADER_FILL = PatternFill("solid", fgColor="B8E6FE")
THIN = Side(style="thin")
BORDER = Border(left=THIN, right=THIN, top=THIN, bottom=THIN)

# column -> number format
NUMBER_FORMATS = {
    "map_at_t": "0.0000",
    "precision_radius2": "0.0000",
    "value": "0.0000",
    "recall": "0.0000",
    "precision": "0.0000",
    "adv": "0.000000",
    "style": "0.000000",
    "l1": "0.000000",
    "total": "0.000000",
    "pair_loss": "0.000000",
    "classification_loss": "0.000000",
    "surrogate": "0.000000",
    "code_bits": "#,##0",
    "step": "#,##0",
    "epoch": "#,##0",
}


# === Artifact discovery ===
def _walk(results_dir, predicate):
    found = []
    for root, _, files in os.walk(results_dir):
        for name in sorted(files):
            if predicate(name):
                found.append(os.path.join(root, name))
    return sorted(found)


def report_tables(path):
    """Split a JSON-lines report into (metrics, curve points) DataFrames."""
    records = read_report_jsonl(path)
    metrics = pd.DataFrame([r for r in records if r.get("type") == "metric"])
    curves = pd.DataFrame([r for r in records if r.get("type") == "curve"])
    return metrics.drop(columns=["type"], errors="ignore"), curves.drop(columns=["type"], errors="ignore")


def collect_tables(results_dir):
    """Ordered {sheet title: DataFrame} for every artifact found."""
    if not os.path.isdir(results_dir):
        raise FileNotFoundError(f"Missing results directory: {results_dir}")
    tables = {}
    for path in _walk(results_dir, lambda n: n.startswith("ablation_") and n.endswith(".parquet")):
        tables[os.path.basename(path)[len("ablation_"):-len(".parquet")]] = pd.read_parquet(path)
    for path in _walk(results_dir, lambda n: n.endswith(".jsonl")):
        stem = os.path.splitext(os.path.basename(path))[0]
        metrics, curves = report_tables(path)
        if not metrics.empty:
            tables[f"{stem} metrics"] = metrics
        if not curves.empty:
            tables[f"{stem} curves"] = curves
    for path in _walk(results_dir, lambda n: n.endswith(("_losses.csv", "_history.csv"))):
        tables[os.path.splitext(os.path.basename(path))[0]] = pd.read_csv(path)
    return tables


def _sheet_name(title, used):
    base = title[:31]
    name, n = base, 2
    while name in used:
        suffix = f" ({n})"
        name = base[: 31 - len(suffix)] + suffix
        n += 1
    used.add(name)
    return name


# === Build and export the workbook ===
def export_workbook(results_dir, out_path):
    tables = collect_tables(results_dir)
    if not tables:
        print("⚠️  No result tables found to export.")
        return None

    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    used = set()
    with pd.ExcelWriter(out_path, engine="openpyxl") as writer:
        for title, df in tables.items():
            sheet_name = _sheet_name(title, used)
            df.to_excel(writer, sheet_name=sheet_name, index=False)
            worksheet = writer.sheets[sheet_name]
            worksheet.freeze_panes = "A2"

            # --- Header formatting + column widths ---
            for col_num, column in enumerate(df.columns, start=1):
                cell = worksheet.cell(row=1, column=col_num)
                cell.font = Font(bold=True)
                cell.fill = HEADER_FILL
                cell.border = BORDER
                cell.alignment = Alignment(horizontal="center", wrap_text=True)
                worksheet.column_dimensions[get_column_letter(col_num)].width = max(14, len(str(column)) + 4)

                # --- Body number formats ---
                number_format = NUMBER_FORMATS.get(str(column))
                for row_num in range(2, len(df) + 2):
                    body = worksheet.cell(row=row_num, column=col_num)
                    body.border = BORDER
                    if number_format:
                        body.number_format = number_format

    print(f"✅ Exported workbook with {len(tables)} sheets to: {out_path}")
    return out_path


def add_arguments(parser):
    parser.add_argument("--results", required=True, help="directory holding run artifacts")
    parser.add_argument("--out", required=True, help="output .xlsx path")


def run(args):
    if not args.out.endswith(".xlsx"):
        raise DataError(f"workbook path must end in .xlsx, got {args.out}")
    export_workbook(args.results, args.out)


if __name__ == "__main__":
    from texhash import main

    sys.exit(main(["export-workbook", *sys.argv[1:]]))
