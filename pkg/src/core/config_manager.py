import copy
import json
import logging
from pathlib import Path

from .errors import ConfigError


class ConfigManager:
    """Manages run configuration loading and saving"""

    def __init__(self, config_file=None, base_dir=None):
        if base_dir is None:
            base_dir = Path.cwd()
        self.base_dir = Path(base_dir)
        if config_file is None:
            self.config_file = self.base_dir / "configs" / "reference_put.json"
        else:
            self.config_file = Path(config_file)

    def get_default_config(self):
        """Get per-section defaults; a section is only filled if the run file names it"""
        return {
            "model": {
                "n": 1,
                "r": 0.05,
                "T": 1.0,
                "lambda": 0.01,
                "S0": [100.0]
            },
            "payoff": {
                "kind": "put_on_min",
                "strike": 100.0,
                "weights": [],
                "strikes": [],
                "lipschitz": None
            },
            "grid": {
                "space_nodes": 201,
                "margin": 5.0,
                "time_steps": 250,
                "refinement_levels": 1,
                "psor": {
                    "omega": 1.5,
                    "tolerance": 1e-9,
                    "max_iterations": 10000,
                    "ordering": "lexicographic"
                }
            },
            "mc": {
                "paths": 2000,
                "seed": None,
                "checkpoints": [0.0, 0.25, 0.5, 0.75],
                "workers": 1
            },
            "probe": {
                "perturbations": ["scaled:0.25", "zero"]
            },
            "thresholds": {
                "mean_stderr_multiple": 3.0,
                "std_slack": 0.05,
                "mean_gate": "finest"
            },
            "campaign": {
                "trees": 1000,
                "min_depth": 1,
                "max_depth": 6,
                "max_branching": 3,
                "seed": None,
                "probes_per_tree": 10,
                "oracle_max_depth": 4,
                "oracle_max_stopping_times": 20000,
                "workers": 1,
                "fault_injection": False,
                "min_perturbed_probes": 0
            },
            "output": {
                "directory": "output",
                "formats": ["csv", "json"],
                "paths_dump": False
            }
        }

    def load_config(self):
        """Load a run configuration, merging section defaults under the file's values"""
        if not self.config_file.exists():
            raise ConfigError(f"Configuration file not found: {self.config_file}")

        try:
            with open(self.config_file, 'r') as f:
                loaded = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Configuration file {self.config_file} is not valid JSON: {e}") from e

        if not isinstance(loaded, dict):
            raise ConfigError(f"Configuration file {self.config_file} must hold a JSON object")

        config = self.merge_defaults(loaded)
        logging.info(f"Configuration successfully loaded from {self.config_file}")
        return config

    def merge_defaults(self, loaded):
        """Fill missing keys of the sections present in `loaded`; absent sections stay absent"""
        defaults = self.get_default_config()
        config = copy.deepcopy(loaded)
        for section, section_defaults in defaults.items():
            if section not in config or not isinstance(section_defaults, dict):
                continue
            if not isinstance(config[section], dict):
                raise ConfigError(f"Section [{section}] must be an object")
            merged = copy.deepcopy(section_defaults)
            for key, value in config[section].items():
                if isinstance(value, dict) and isinstance(merged.get(key), dict):
                    merged[key].update(value)
                else:
                    merged[key] = value
            config[section] = merged
        return config

    @staticmethod
    def require_sections(config, sections):
        """Raise ConfigError naming the first section the command needs but the file lacks"""
        for section in sections:
            if section not in config:
                raise ConfigError(f"Missing required section [{section}]")

    @staticmethod
    def require_keys(config, section, keys):
        """Same as require_sections, one level down"""
        for key in keys:
            if config[section].get(key) is None:
                raise ConfigError(f"Section [{section}] needs '{key}'")

    def save_config(self, config, target=None):
        """Save a configuration as indented, key-sorted JSON"""
        target = Path(target) if target is not None else self.config_file
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            with open(target, 'w') as f:
                json.dump(config, f, indent=2, sort_keys=True)
                f.write("\n")
            logging.info(f"Configuration successfully saved to {target}")
            return True
        except Exception as e:
            logging.error(f"Failed to save configuration to {target}: {e}", exc_info=True)
            return False
