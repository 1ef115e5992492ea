import json
import shutil
import logging
from pathlib import Path

import numpy as np

from core.balance_verifier import (MEAN_GATES, breached_times, extrapolated_means, ladder_breaches, run_ladder,
                                   uniqueness_probe)
from core.config_manager import ConfigManager
from core.errors import ConfigError, EngineError, IdentityViolation, ThresholdBreach
from core.market_model import MarketModel
from core.obstacle_pde import SpatialGrid, eval_v, solve_obstacle
from core.oracles import crr_price
from core.output_generator import OutputGenerator
from core.payoff import PayoffSpec
from core.psor import PSORSettings
from core.tree_campaign import CampaignSettings, run_campaign
from core.utils import Utils

COMMANDS = ('price', 'verify-balance', 'snell-check')


class BalanceApp:
    """Config-driven front end: one run file in, reproducible reports out"""

    def __init__(self, config_path=None, out_dir=None, quiet=False, recalibrate=False, base_dir=None):
        self.base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
        self.config_manager = ConfigManager(config_path, base_dir=self.base_dir)
        self.out_dir = out_dir
        self.quiet = quiet
        self.recalibrate = recalibrate
        self.config = None
        self.output = None

    @property
    def golden_dir(self):
        return self.base_dir / "golden" / self.config_manager.config_file.stem

    def run(self, command):
        """
        Execute one command and map its outcome onto the exit-code contract

        Returns:
            int: 0 ok, 2 config, 3 solver, 4 threshold, 5 exact-identity violation, 1 anything else
        """
        handlers = {
            'price': self.cmd_price,
            'verify-balance': self.cmd_verify_balance,
            'snell-check': self.cmd_snell_check,
        }
        if command not in handlers:
            logging.error(f"Unknown command '{command}', expected one of {COMMANDS}")
            return 2
        try:
            if self.recalibrate and Utils.is_ci_environment():
                raise ConfigError("Refusing to recalibrate golden files under CI")
            self.config = self.config_manager.load_config()
            self.output = self._make_output()
            return handlers[command](self.config)
        except EngineError as e:
            logging.error(f"{type(e).__name__}: {e}", exc_info=not self.quiet and e.exit_code != 2)
            return e.exit_code
        except Exception as e:
            logging.error(f"Unexpected error running '{command}': {e}", exc_info=True)
            return 1

    def _make_output(self):
        section = self.config.get('output', {})
        directory = self.out_dir or section.get('directory', 'output')
        formats = section.get('formats', ['csv', 'json'])
        try:
            return OutputGenerator(directory, formats)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    @staticmethod
    def _spot(config, model):
        S0 = config['model'].get('S0')
        if S0 is None:
            raise ConfigError("Section [model] needs S0")
        S0 = np.atleast_1d(np.asarray(S0, dtype=float))
        if S0.size != model.n:
            raise ConfigError(f"S0 has {S0.size} entries for a {model.n}-asset model")
        return S0

    def _market(self, config):
        ConfigManager.require_sections(config, ['model', 'volatility', 'payoff', 'grid'])
        ConfigManager.require_keys(config, 'grid', ['space_nodes', 'time_steps'])
        model = MarketModel.from_config(config)
        payoff = PayoffSpec.from_config(config['payoff'])
        payoff.check_dimension(model.n)
        return model, payoff, self._spot(config, model)

    def _save_resolved_config(self, config):
        self.config_manager.save_config(config, Path(self.output.output_dir) / "run_config.json")

    def _freeze(self, names):
        """Copy primary outputs into the golden directory (explicit recalibration only)"""
        target = Utils.ensure_directory(self.golden_dir)
        for name in names:
            source = Path(self.output.output_dir) / name
            if source.exists():
                shutil.copyfile(source, target / name)
                logging.info(f"Golden file frozen: {target / name}")

    def _compare_golden(self, names):
        """Names of outputs whose bytes differ from their golden copy; missing goldens are skipped"""
        mismatched = []
        for name in names:
            golden = self.golden_dir / name
            if not golden.exists():
                logging.warning(f"No golden file {golden}; comparison skipped")
                continue
            produced = Path(self.output.output_dir) / name
            if produced.read_bytes() != golden.read_bytes():
                mismatched.append(name)
        return mismatched

    def cmd_price(self, config):
        """Solve the obstacle problem, print v(0, S0) and write the surface dump"""
        model, payoff, S0 = self._market(config)
        grid_cfg = config['grid']
        grid = SpatialGrid.around(model, S0, grid_cfg['space_nodes'], grid_cfg['time_steps'],
                                  float(grid_cfg.get('margin', 5.0)))
        settings = PSORSettings.from_config(grid_cfg.get('psor'))
        surface = solve_obstacle(model, payoff, grid, settings)
        value = eval_v(surface, 0.0, S0)

        self.output.write_surface(surface)
        summary = {'value': value, 'S0': S0.tolist(), 'grid': surface.report['grid']}
        self.output.write_json("price", summary)
        self._save_resolved_config(config)
        print(value)

        reference, source = self._binomial_reference(model, payoff, S0)
        if reference is not None:
            relative = abs(value - reference) / max(abs(reference), 1e-12)
            logging.info(f"v(0, S0) = {value:.6f}, {source} {reference:.6f} (relative {relative:.3%})")
            if relative > 0.005:
                logging.warning(f"Price differs from the {source} by {relative:.3%}")
        return 0

    @staticmethod
    def _binomial_oracle(model, payoff, S0):
        """10,000-step CRR value for one-asset constant-coefficient puts and calls, else None"""
        if model.n != 1 or not model.is_constant or payoff.kind not in ('put_on_min', 'call_on_max'):
            return None
        div, vol = model.constant_coefficients()
        option_type = 'put' if payoff.kind == 'put_on_min' else 'call'
        return crr_price(float(S0[0]), payoff.strike, model.r, float(div[0]), abs(float(vol[0, 0])), model.T,
                         steps=10000, option_type=option_type, american=True)

    def _binomial_reference(self, model, payoff, S0):
        """(value, label) from the frozen golden, or from a live CRR run when none is frozen"""
        golden = self.golden_dir / "binomial.json"
        if golden.exists() and not self.recalibrate:
            with open(golden) as f:
                return float(json.load(f)['value']), "binomial golden"

        oracle = self._binomial_oracle(model, payoff, S0)
        if oracle is None:
            if self.recalibrate:
                logging.warning("No binomial oracle for this model; nothing to recalibrate")
            return None, None
        if self.recalibrate:
            target = Utils.ensure_directory(self.golden_dir) / "binomial.json"
            with open(target, 'w', newline='\n') as f:
                json.dump({'steps': 10000, 'value': oracle}, f, indent=2, sort_keys=True)
                f.write("\n")
            logging.info(f"Golden file frozen: {target}")
        return oracle, "binomial oracle"

    def cmd_verify_balance(self, config):
        """Solve, simulate, compute residuals and probes; gate on the frozen thresholds"""
        model, payoff, S0 = self._market(config)
        ConfigManager.require_sections(config, ['mc'])
        mc = config['mc']
        if mc.get('seed') is None:
            raise ConfigError("Section [mc] needs a seed")
        try:
            n_paths = int(mc['paths'])
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"Section [mc] needs an integer path count: {e}") from e
        if n_paths < 1:
            raise ConfigError(f"Path count must be positive, got {n_paths}")

        grid_cfg = config['grid']
        levels = int(grid_cfg.get('refinement_levels', 1))
        thresholds = config.get('thresholds', self.config_manager.get_default_config()['thresholds'])
        if thresholds.get('mean_gate', 'finest') not in MEAN_GATES:
            raise ConfigError(f"Section [thresholds] has mean_gate '{thresholds['mean_gate']}', "
                              f"expected one of {list(MEAN_GATES)}")
        ladder = run_ladder(
            model, payoff, S0,
            space_nodes=int(grid_cfg['space_nodes']),
            time_steps=int(grid_cfg['time_steps']),
            n_paths=n_paths,
            seed=int(mc['seed']),
            checkpoint_fractions=mc.get('checkpoints', [0.0, 0.25, 0.5, 0.75]),
            levels=levels,
            margin=float(grid_cfg.get('margin', 5.0)),
            settings=PSORSettings.from_config(grid_cfg.get('psor')),
            workers=mc.get('workers'),
        )
        finest = ladder[-1]
        gate = (float(thresholds.get('mean_stderr_multiple', 3.0)), float(thresholds.get('std_slack', 0.0)),
                str(thresholds.get('mean_gate', 'finest')))
        breaches = ladder_breaches(ladder, *gate)

        checkpoints = [c.index for c in finest.report.checkpoints]
        perturbations = config.get('probe', {}).get('perturbations', [])
        flagged = breached_times(ladder, *gate)
        outputs = []
        outputs += self.output.write_balance_report(finest.report, flagged_times=flagged)
        if perturbations:
            probes = uniqueness_probe(finest.bundle, finest.surface, perturbations, checkpoints,
                                      workers=mc.get('workers'))
            outputs += self.output.write_probe_report(probes)
        if len(ladder) > 1:
            outputs += self.output.write_ladder(ladder, breaches=breaches, flagged_times=flagged,
                                                 extrapolated=extrapolated_means(ladder))
        if config.get('output', {}).get('paths_dump'):
            self.output.write_paths(finest.bundle)
        self._save_resolved_config(config)

        primary = sorted({Path(p).name for p in outputs if Path(p).suffix in ('.json', '.csv')})
        if self.recalibrate:
            self._freeze(primary)
        else:
            mismatched = self._compare_golden(primary)
            breaches += [f"{name} differs from its golden copy" for name in mismatched]

        for c in finest.report.checkpoints:
            print(f"t={c.t:g} mean={c.mean:.6g} std={c.std:.6g} max_abs={c.max_abs:.6g}")
        if breaches:
            for breach in breaches:
                logging.warning(f"Threshold breach: {breach}")
            raise ThresholdBreach(f"{len(breaches)} threshold breach(es); first: {breaches[0]}")
        logging.info("All balance thresholds passed")
        return 0

    def cmd_snell_check(self, config):
        """Exact tree campaign; prints the counts and the witness tree on failure"""
        ConfigManager.require_sections(config, ['campaign'])
        settings = CampaignSettings.from_config(config['campaign'])
        result = run_campaign(settings)
        self.output.write_campaign(result)
        self._save_resolved_config(config)

        summary = result.to_dict()
        print(f"trees: {summary['trees']}")
        print(f"nodes: {summary['nodes']}")
        for name, count in summary['checks'].items():
            print(f"{name}: {count}")
        print(f"perturbed_probes: {summary['perturbed_probes']}")
        print(f"violations: {summary['violations']}")
        if not result.ok:
            print(json.dumps(result.witness, indent=2, sort_keys=True))
            first = result.violations[0]
            raise IdentityViolation(
                f"{first['check']} failed on tree {first['tree']} at node {first['node']}", witness=result.witness)
        if result.probe_shortfall:
            raise ThresholdBreach(f"Only {result.perturbed_probes} perturbed-martingale probes ran, "
                                  f"{settings.min_perturbed_probes} required")
        return 0
