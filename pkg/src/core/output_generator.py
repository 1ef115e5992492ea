import json
import math
import logging
from pathlib import Path

import numpy as np
import pandas as pd
from openpyxl import Workbook
from openpyxl.styles import Font, PatternFill

from .sde_sim import paths_frame
from .utils import Utils

FORMATS = ('csv', 'json', 'xlsx')


def jsonable(value):
    """Plain JSON types; non-finite floats become the strings "inf", "-inf" and "nan" """
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    if isinstance(value, np.bool_):
        return bool(value)
    return value


class OutputGenerator:
    """Writes run artifacts under one output directory"""

    def __init__(self, output_dir, formats=('csv', 'json')):
        self.output_dir = Path(output_dir)
        self.formats = tuple(str(f).lower() for f in formats)
        unknown = [f for f in self.formats if f not in FORMATS]
        if unknown:
            raise ValueError(f"Unknown output formats {unknown}, expected a subset of {FORMATS}")
        self.written = []

    def _target(self, name):
        Utils.ensure_directory(self.output_dir)
        return self.output_dir / name

    def write_json(self, name, data):
        """Key-sorted, indented JSON with a trailing newline; identical data gives identical bytes"""
        path = self._target(f"{name}.json")
        try:
            with open(path, 'w', newline='\n') as f:
                json.dump(jsonable(data), f, indent=2, sort_keys=True, allow_nan=False)
                f.write("\n")
        except Exception as e:
            logging.error(f"Error writing {path}: {e}", exc_info=True)
            raise
        self.written.append(path)
        logging.debug(f"Wrote {path}")
        return path

    def write_csv(self, name, frame):
        path = self._target(f"{name}.csv")
        try:
            frame.to_csv(path, index=False, lineterminator='\n', float_format='%.17g')
        except Exception as e:
            logging.error(f"Error writing {path}: {e}", exc_info=True)
            raise
        self.written.append(path)
        logging.debug(f"Wrote {path}")
        return path

    def write_xlsx(self, name, frame, flagged_rows=None, sheet_name="Report"):
        """
        Workbook copy of a table; flagged rows are filled red, the others green

        Args:
            name (str): File stem
            frame (DataFrame): Table to write
            flagged_rows (set, optional): Zero-based row positions to highlight as breaches
            sheet_name (str): Worksheet title
        """
        path = self._target(f"{name}.xlsx")
        ok_fill = PatternFill(start_color="C6EFCE", end_color="C6EFCE", fill_type="solid")  # Light green
        bad_fill = PatternFill(start_color="FFC7CE", end_color="FFC7CE", fill_type="solid")  # Light red

        wb = Workbook()
        ws = wb.active
        ws.title = sheet_name
        for col_idx, header in enumerate(frame.columns, 1):
            cell = ws.cell(row=1, column=col_idx, value=str(header))
            cell.font = Font(bold=True)

        for row_idx, row in enumerate(frame.itertuples(index=False), 2):
            fill = None
            if flagged_rows is not None:
                fill = bad_fill if (row_idx - 2) in flagged_rows else ok_fill
            for col_idx, value in enumerate(row, 1):
                value = jsonable(value)
                cell = ws.cell(row=row_idx, column=col_idx, value=value)
                if fill is not None:
                    cell.fill = fill
        try:
            wb.save(path)
        except Exception as e:
            logging.error(f"Error writing {path}: {e}", exc_info=True)
            raise
        self.written.append(path)
        return path

    def write_table(self, name, frame, payload=None, flagged_rows=None):
        """Write a table in every configured format; JSON gets `payload` when given"""
        paths = []
        if 'csv' in self.formats:
            paths.append(self.write_csv(name, frame))
        if 'json' in self.formats:
            paths.append(self.write_json(name, payload if payload is not None else frame.to_dict(orient='list')))
        if 'xlsx' in self.formats:
            paths.append(self.write_xlsx(name, frame, flagged_rows))
        return paths

    def write_surface(self, surface, name="surface"):
        """Surface dump (CSV only) and the solver report (JSON)"""
        frame = pd.DataFrame(surface.frame_columns())
        paths = [self.write_csv(name, frame)]
        paths.append(self.write_json(f"{name}_solver", surface.report))
        logging.info(f"Surface dump written: {len(frame)} rows")
        return paths

    def write_paths(self, bundle, name="paths"):
        return [self.write_csv(name, paths_frame(bundle))]

    def write_balance_report(self, report, name="balance", flagged_times=None):
        """BalanceReport as JSON plus the one-row-per-checkpoint CSV twin"""
        rows = [c.to_dict() for c in report.checkpoints]
        frame = pd.DataFrame(rows, columns=['t', 'mean', 'std', 'max_abs', 'stderr', 'argmax_at_T_fraction',
                                            'argmax_exercise_or_T_fraction'])
        flagged = None
        if flagged_times is not None:
            flagged = {i for i, c in enumerate(report.checkpoints) if c.t in flagged_times}
        return self.write_table(name, frame, payload=report.to_dict(), flagged_rows=flagged)

    def write_probe_report(self, probe_report, name="probes"):
        rows = []
        for probe in probe_report.probes:
            label = probe['report'].config['field']
            for stats, ratio in zip(probe['report'].checkpoints, probe['ratios']):
                rows.append({'field': label, 't': stats.t, 'std': stats.std, 'ratio': jsonable(ratio)})
        frame = pd.DataFrame(rows, columns=['field', 't', 'std', 'ratio'])
        return self.write_table(name, frame, payload=probe_report.to_dict())

    def write_ladder(self, ladder, name="ladder", breaches=None, flagged_times=None, extrapolated=None):
        rows = []
        for level in ladder:
            for stats in level.report.checkpoints:
                rows.append({
                    'level': level.level,
                    'dt': level.dt,
                    'h': level.h[0],
                    't': stats.t,
                    'mean': stats.mean,
                    'std': stats.std,
                    'stderr': stats.stderr,
                    'compensator_increase_fraction': level.compensator['fraction'],
                })
        frame = pd.DataFrame(rows, columns=['level', 'dt', 'h', 't', 'mean', 'std', 'stderr',
                                            'compensator_increase_fraction'])
        payload = {
            'levels': [
                {
                    'level': level.level,
                    'dt': level.dt,
                    'h': level.h,
                    'value_at_spot': level.surface_value,
                    'compensator': level.compensator,
                    'report': level.report.to_dict(),
                }
                for level in ladder
            ],
            'breaches': list(breaches or []),
        }
        if extrapolated is not None:
            payload['extrapolated'] = list(extrapolated)
        flagged = None
        if flagged_times is not None:
            flagged = {i for i, row in enumerate(rows) if row['t'] in flagged_times}
        return self.write_table(name, frame, payload=payload, flagged_rows=flagged)

    def write_campaign(self, result, name="snell_check"):
        payload = result.to_dict()
        paths = [self.write_json(name, payload)]
        if result.witness is not None:
            paths.append(self.write_json(f"{name}_witness", result.witness))
        return paths
