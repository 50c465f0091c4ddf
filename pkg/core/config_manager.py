"""Centralized settings manager for amscov runs."""
import json
import logging
import os

logger = logging.getLogger(__name__)

DEFAULT_SETTINGS_FILE = "amscov.json"


class ConfigManager:
    """Manages run settings shared by every subcommand."""

    def __init__(self, config_path=DEFAULT_SETTINGS_FILE):
        self.config_path = config_path
        self.config = self._load_config()

    def _load_config(self):
        """Load settings from file, return defaults if not found"""
        defaults = self._get_defaults()
        if not os.path.exists(self.config_path):
            logger.info("%s not found; using built-in defaults", self.config_path)
            return defaults
        try:
            with open(self.config_path, 'r', encoding='utf-8') as f:
                loaded = json.load(f)
            if not isinstance(loaded, dict):
                raise ValueError("top level must be a JSON object")
            defaults.update(loaded)
            return defaults
        except Exception as e:
            logger.warning("Could not load settings from %s: %s; using defaults", self.config_path, e)
            return self._get_defaults()

    def _get_defaults(self):
        """Return default settings."""
        return {
            "database_path": "coverage.amsdb",
            "output_dir": "amscov_runs",
            "seed": 0,
            "log_level": "WARNING",
            "points_per_decade": 100,
            "bode_f_lo": 1.0,
            "bode_f_hi": 1e6,
            "explore_amplitude": 1.0,
            "explore_settle_constants": 10.0,
            "bo_budget": 20,
            "bo_n_init": None,  # max(2, 2k)
            "bo_candidates": 1024,
            "bo_restarts": 5,
            "gp_jitter": 1e-10,
            "gp_max_jitter": 1e-6,
            "gp_lengthscale_grid": 16,
            "halve_crossings": False,
            "max_workers": 1,
        }

    def get(self, key, default=None):
        """Get setting value"""
        return self.config.get(key, default)

    def set(self, key, value):
        """Set setting value"""
        self.config[key] = value

    def update(self, overrides):
        """Apply overrides, skipping ``None`` values (unset command-line flags)."""
        for key, value in overrides.items():
            if value is not None:
                self.config[key] = value

    def save(self):
        """Save settings to file"""
        try:
            with open(self.config_path, 'w', encoding='utf-8') as f:
                json.dump(self.config, f, indent=2)
            return True
        except Exception as e:
            logger.error("Error saving settings to %s: %s", self.config_path, e)
            return False

    def get_database_path(self):
        return self.config.get("database_path", "coverage.amsdb")

    def get_output_dir(self):
        return self.config.get("output_dir", "amscov_runs")

    def get_seed(self):
        return int(self.config.get("seed", 0))

    def get_log_level(self):
        level = str(self.config.get("log_level", "WARNING")).upper()
        return getattr(logging, level, logging.WARNING)

    def get_max_workers(self):
        """Worker threads for independent simulations (at least 1)."""
        return max(1, int(self.config.get("max_workers", 1)))

    def get_bo_settings(self):
        """Optimizer knobs as keyword arguments for ``BoSettings``."""
        return {
            "n_candidates": int(self.config.get("bo_candidates", 1024)),
            "n_restarts": int(self.config.get("bo_restarts", 5)),
            "jitter": float(self.config.get("gp_jitter", 1e-10)),
            "max_jitter": float(self.config.get("gp_max_jitter", 1e-6)),
            "lengthscale_grid": int(self.config.get("gp_lengthscale_grid", 16)),
        }

    def get_project_root(self):
        """Directory holding the settings file"""
        return os.path.dirname(os.path.abspath(self.config_path))

    def resolve(self, path):
        """Relative paths in settings are taken from the settings file's directory."""
        if not path or os.path.isabs(path):
            return path
        return os.path.join(self.get_project_root(), path)

