"""
Configuration Manager for the micro-expert compression toolkit

Resolves run parameters with priority order:
1. Explicit command-line flag
2. Environment variable (CAMERA_SEED, CAMERA_THREADS)
3. Stored configuration file (data/config.json, or the path in CAMERA_CONFIG)
4. Built-in defaults
"""

import json
import logging
import os
from typing import Any, Dict, Optional
from datetime import datetime, timezone
from pathlib import Path

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = "data/config.json"
CONFIG_PATH_ENV = "CAMERA_CONFIG"

DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "threads": 1,
    "alpha": 1.0,
    "lambda": 0.2,
    "ratios": "0.2,0.6,0.2",
    "bits": "3,2,1",
    "group_size": 128,
    "variant": "q",
    "trials": 500,
    "log_level": "INFO",
}

ENV_VARS: Dict[str, str] = {
    "seed": "CAMERA_SEED",
    "threads": "CAMERA_THREADS",
}


class ConfigManager:
    """Manages run parameters from flags, environment, a JSON file and defaults."""

    def __init__(self, config_path: Optional[str] = None):
        """
        Initialize configuration manager.

        Args:
            config_path: Path to the configuration file; defaults to $CAMERA_CONFIG,
                then data/config.json
        """
        self.config_path = Path(config_path or os.environ.get(CONFIG_PATH_ENV) or DEFAULT_CONFIG_PATH)
        self._stored: Optional[dict] = None

    def get(self, key: str, cli_value: Any = None) -> Any:
        """
        Resolve a parameter.

        Args:
            key: parameter name, e.g. 'seed'
            cli_value: value given on the command line, or None

        Returns:
            The resolved value, coerced to the default's type when one exists

        Raises:
            KeyError: unknown key with no value from any source
            ValueError: an environment or stored value cannot be coerced
        """
        if cli_value is not None:
            return cli_value

        env_name = ENV_VARS.get(key)
        if env_name and os.environ.get(env_name):
            return self._coerce(key, os.environ[env_name], env_name)

        stored = self._load_config() or {}
        if key in stored and key != "updated_at":
            return self._coerce(key, stored[key], str(self.config_path))

        if key in DEFAULTS:
            return DEFAULTS[key]
        raise KeyError(f"unknown configuration key '{key}'")

    def get_source(self, key: str, cli_value: Any = None) -> str:
        """
        Determine where a parameter comes from.

        Returns:
            'cli', 'environment', 'stored', 'default' or 'none'
        """
        if cli_value is not None:
            return 'cli'
        env_name = ENV_VARS.get(key)
        if env_name and os.environ.get(env_name):
            return 'environment'
        stored = self._load_config() or {}
        if key in stored:
            return 'stored'
        return 'default' if key in DEFAULTS else 'none'

    def save(self, overrides: Dict[str, Any]) -> bool:
        """
        Persist parameter defaults to the configuration file.

        Args:
            overrides: parameters to store; unknown keys are rejected

        Returns:
            True on success, False on failure
        """
        unknown = sorted(set(overrides) - set(DEFAULTS))
        if unknown:
            logger.error("Refusing to store unknown configuration keys: %s", ", ".join(unknown))
            return False
        try:
            config = dict(self._load_config() or {})
            for key, value in overrides.items():
                config[key] = self._coerce(key, value, "overrides")
            config['updated_at'] = datetime.now(timezone.utc).isoformat().replace('+00:00', 'Z')
            self._save_config(config)
            return True
        except (OSError, ValueError) as e:
            logger.error("Error storing configuration: %s", e)
            return False

    def _coerce(self, key: str, value: Any, source: str) -> Any:
        default = DEFAULTS.get(key)
        if default is None or type(value) is type(default):
            return value
        try:
            if isinstance(default, str) and isinstance(value, (list, tuple)):
                return ",".join(str(v) for v in value)
            if isinstance(default, int) and isinstance(value, float) and not value.is_integer():
                raise ValueError
            return type(default)(value)
        except (TypeError, ValueError):
            raise ValueError(f"invalid value {value!r} for '{key}' from {source}")

    def _load_config(self) -> Optional[dict]:
        """
        Load configuration from JSON file.

        Returns:
            Configuration dictionary or None if the file doesn't exist or is unreadable
        """
        if self._stored is not None:
            return self._stored
        if not self.config_path.exists():
            return None

        try:
            with open(self.config_path, 'r') as f:
                loaded = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            logger.warning("Failed to load config %s: %s", self.config_path, e)
            return None
        if not isinstance(loaded, dict):
            logger.warning("Ignoring config %s: top level is not an object", self.config_path)
            return None
        self._stored = loaded
        return loaded

    def _save_config(self, config: dict) -> None:
        self.config_path.parent.mkdir(parents=True, exist_ok=True)

        with open(self.config_path, 'w') as f:
            json.dump(config, f, indent=2, sort_keys=True)
        self._stored = config

        # owner read/write only
        try:
            os.chmod(self.config_path, 0o600)
        except OSError:
            pass  # Windows doesn't support chmod
