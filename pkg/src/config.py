"""
Configuration management for hahnvar.
Holds persistent solver and quadrature defaults; command line flags override them.
"""

import json
import logging
import os
import sys

from src.jn_integral import QUADRATURE_MODES, QuadratureSpec
from src.varcalc import SENSES, SolveOptions

logger = logging.getLogger(__name__)

# Default configuration values
DEFAULT_CONFIG = {
    'depth': 60,
    'tail_tol': 1e-13,
    'max_terms': 10000,
    'quadrature_mode': 'tail_tol',  # 'tail_tol' or 'fixed_depth'
    'solver_tol': 1e-10,
    'max_iter': 200,
    'sense': 'min',  # 'min' or 'max'
    'fixed_point_step': None,  # None means 1e-6 * max(1, |omega0|)
    'min_step_scale': 1e-3,  # lattice depth cap, see varcalc.working_lattice
    'isoperimetric_restarts': 3,
    'omega0_tie_weight': None,  # None means the orbit tails are tied exactly
    'seed': 0,
    'sweep_workers': 1,
    'float_digits': 17,
    'log_level': 'WARNING',
}

CONFIG_FILE = 'config.json'

LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR')


class Config:
    """Configuration manager with file persistence."""

    def __init__(self, config_dir=None):
        """Initialize config manager.

        Args:
            config_dir: Directory holding the config file. Defaults to the repo root.
        """
        if config_dir is None:
            if getattr(sys, 'frozen', False):
                config_dir = os.path.dirname(sys.executable)
            else:
                config_dir = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

        self.config_dir = config_dir
        self.config_path = os.path.join(config_dir, CONFIG_FILE)
        self._config = dict(DEFAULT_CONFIG)
        self.load()

    def load(self):
        """Load configuration from file."""
        try:
            if os.path.exists(self.config_path):
                with open(self.config_path, 'r', encoding='utf-8') as f:
                    saved_config = json.load(f)
                    # Merge with defaults (in case new options were added)
                    self._config.update(saved_config)
        except Exception as e:
            logger.warning("Could not load config: %s", e)

    def save(self):
        """Save configuration to file. Returns False when the file cannot be written."""
        try:
            with open(self.config_path, 'w', encoding='utf-8') as f:
                json.dump(self._config, f, indent=2)
            return True
        except Exception as e:
            logger.warning("Could not save config: %s", e)
            return False

    def get(self, key, default=None):
        """Get a configuration value."""
        return self._config.get(key, default)

    def update(self, key, text):
        """Set key from its command line text through the key's validating setter.

        The text is read as JSON where possible ('1e-8', '60', 'null'), otherwise
        kept as a plain string ('max', 'debug').
        """
        if key not in DEFAULT_CONFIG:
            raise ValueError(f"unknown config key {key!r}; choose from {sorted(DEFAULT_CONFIG)}")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        try:
            setattr(self, key, value)
        except (TypeError, ValueError) as e:
            raise ValueError(f"bad value for {key}: {e}") from None
        return self.save()

    def as_dict(self):
        return dict(self._config)

    # Property accessors for common settings
    @property
    def depth(self):
        return int(self._config.get('depth', 60))

    @depth.setter
    def depth(self, value):
        self._config['depth'] = max(2, int(value))
        self.save()

    @property
    def tail_tol(self):
        return float(self._config.get('tail_tol', 1e-13))

    @tail_tol.setter
    def tail_tol(self, value):
        value = float(value)
        if not value > 0.0:
            raise ValueError(f"tail_tol must be positive, got {value!r}")
        self._config['tail_tol'] = value
        self.save()

    @property
    def max_terms(self):
        return int(self._config.get('max_terms', 10000))

    @max_terms.setter
    def max_terms(self, value):
        self._config['max_terms'] = max(1, int(value))
        self.save()

    @property
    def quadrature_mode(self):
        return self._config.get('quadrature_mode', 'tail_tol')

    @quadrature_mode.setter
    def quadrature_mode(self, value):
        if value not in QUADRATURE_MODES:
            raise ValueError(f"quadrature_mode must be one of {QUADRATURE_MODES}, got {value!r}")
        self._config['quadrature_mode'] = value
        self.save()

    @property
    def solver_tol(self):
        return float(self._config.get('solver_tol', 1e-10))

    @solver_tol.setter
    def solver_tol(self, value):
        value = float(value)
        if not value > 0.0:
            raise ValueError(f"solver_tol must be positive, got {value!r}")
        self._config['solver_tol'] = value
        self.save()

    @property
    def max_iter(self):
        return int(self._config.get('max_iter', 200))

    @max_iter.setter
    def max_iter(self, value):
        self._config['max_iter'] = max(1, int(value))
        self.save()

    @property
    def sense(self):
        return self._config.get('sense', 'min')

    @sense.setter
    def sense(self, value):
        if value not in SENSES:
            raise ValueError(f"sense must be one of {SENSES}, got {value!r}")
        self._config['sense'] = value
        self.save()

    @property
    def fixed_point_step(self):
        return self._config.get('fixed_point_step')

    @fixed_point_step.setter
    def fixed_point_step(self, value):
        self._config['fixed_point_step'] = None if value is None else float(value)
        self.save()

    @property
    def min_step_scale(self):
        return float(self._config.get('min_step_scale', 1e-3))

    @min_step_scale.setter
    def min_step_scale(self, value):
        value = float(value)
        if not value > 0.0:
            raise ValueError(f"min_step_scale must be positive, got {value!r}")
        self._config['min_step_scale'] = value
        self.save()

    @property
    def isoperimetric_restarts(self):
        return int(self._config.get('isoperimetric_restarts', 3))

    @isoperimetric_restarts.setter
    def isoperimetric_restarts(self, value):
        self._config['isoperimetric_restarts'] = max(0, int(value))
        self.save()

    @property
    def omega0_tie_weight(self):
        tie = self._config.get('omega0_tie_weight')
        return None if tie is None else float(tie)

    @omega0_tie_weight.setter
    def omega0_tie_weight(self, value):
        if value is not None:
            value = float(value)
            if not value > 0.0:
                raise ValueError(f"omega0_tie_weight must be positive or null, got {value!r}")
        self._config['omega0_tie_weight'] = value
        self.save()

    @property
    def seed(self):
        return int(self._config.get('seed', 0))

    @seed.setter
    def seed(self, value):
        self._config['seed'] = int(value)
        self.save()

    @property
    def sweep_workers(self):
        return int(self._config.get('sweep_workers', 1))

    @sweep_workers.setter
    def sweep_workers(self, value):
        self._config['sweep_workers'] = max(1, int(value))
        self.save()

    @property
    def float_digits(self):
        return int(self._config.get('float_digits', 17))

    @float_digits.setter
    def float_digits(self, value):
        self._config['float_digits'] = min(17, max(1, int(value)))
        self.save()

    @property
    def log_level(self):
        level = str(self._config.get('log_level', 'WARNING')).upper()
        return level if level in LOG_LEVELS else 'WARNING'

    @log_level.setter
    def log_level(self, value):
        value = str(value).upper()
        if value not in LOG_LEVELS:
            raise ValueError(f"log_level must be one of {LOG_LEVELS}, got {value!r}")
        self._config['log_level'] = value
        self.save()

    def quadrature_spec(self):
        """QuadratureSpec built from the stored values."""
        return QuadratureSpec(max_terms=self.max_terms, tail_tol=self.tail_tol,
                              mode=self.quadrature_mode)

    def solver_options(self, **overrides):
        """SolveOptions built from the stored values; keyword arguments win."""
        values = {
            'tol': self.solver_tol,
            'max_iter': self.max_iter,
            'depth': self.depth,
            'quadrature': self.quadrature_spec(),
            'min_step_scale': self.min_step_scale,
            'restarts': self.isoperimetric_restarts,
            'seed': self.seed,
            'omega0_tie_weight': self.omega0_tie_weight,
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return SolveOptions(**values)

    def provenance(self):
        """Defaults block written into every report."""
        keys = ('depth', 'tail_tol', 'max_terms', 'quadrature_mode', 'solver_tol',
                'max_iter', 'sense', 'min_step_scale', 'isoperimetric_restarts',
                'omega0_tie_weight', 'seed')
        return {key: self._config.get(key, DEFAULT_CONFIG[key]) for key in keys}
