"""Workspace directory, its configuration file and per-component log files.

A workspace is a directory holding ``workspace_config.yml`` plus the folders the
commands write into (datasets, encoder and base checkpoints, story checkpoints,
samples, reports and logs). Every manager derives from :class:`WorkspaceManager`
so it shares the configuration and gets its own log file under ``logs/``.
"""
import os
import logging
from typing import Any, Dict, Optional

import yaml

from .config import EvalConfig, ModelConfig, PretrainConfig, TrainConfig
from .errors import ValidationError

CONFIG_FILE_NAME = "workspace_config.yml"
LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


def configure_component_logger(name: str, log_dir: Optional[str]) -> logging.Logger:
    """Return the named component logger writing to ``<log_dir>/<name>.log``.

    Existing handlers are dropped first so a logger never writes into the log file
    of a previously opened workspace.
    """
    logger = logging.getLogger(name)
    logger.setLevel(logging.DEBUG)
    logger.propagate = False

    for handler in logger.handlers[:]:
        logger.removeHandler(handler)
        handler.close()

    if log_dir is None:
        logger.addHandler(logging.NullHandler())
        return logger

    os.makedirs(log_dir, exist_ok=True)
    file_handler = logging.FileHandler(os.path.join(log_dir, f"{name.lower()}.log"))
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.addHandler(file_handler)
    return logger


class WorkspaceManager:
    """Loads (or creates) the workspace configuration and sets up logging."""

    STRUCTURE = ("data", "encoders", "base", "checkpoints", "samples", "reports", "logs")

    def __init__(self, workspace_path: Optional[str] = None, component: str = "Workspace"):
        """Open the workspace, creating its folders and default config when missing.

        Args:
            workspace_path: Workspace directory. ``None`` uses the current directory.
            component: Name of the component logger and its log file.
        """
        self.workspace_path = os.path.abspath(workspace_path or os.getcwd())
        os.makedirs(self.workspace_path, exist_ok=True)
        self.config_path = os.path.join(self.workspace_path, CONFIG_FILE_NAME)
        self.component = component

        self.config = self.load_config()
        self.create_dir_struct()
        self.logger = configure_component_logger(component, self.path_for("logs"))
        self._add_component_log()

    def _default_config(self) -> Dict[str, Any]:
        return {
            "workspace_path": self.workspace_path,
            "project_structure": {
                name: os.path.join(self.workspace_path, name) for name in self.STRUCTURE
            },
            "logs": {},
            "model": ModelConfig().to_dict(),
            "train": TrainConfig().to_dict(),
            "pretrain": PretrainConfig().to_dict(),
            "eval": EvalConfig().to_dict(),
        }

    def load_config(self) -> Dict[str, Any]:
        """Read ``workspace_config.yml``; write the defaults first when it is absent."""
        if not os.path.exists(self.config_path):
            config = self._default_config()
            self._write(config)
            return config
        try:
            with open(self.config_path, "r", encoding="utf-8") as config_file:
                config = yaml.safe_load(config_file) or {}
        except yaml.YAMLError as e:
            raise ValidationError(f"Failed to parse workspace config at {self.config_path}: {e}") from e

        defaults = self._default_config()
        for key, value in defaults.items():
            config.setdefault(key, value)
        for name, path in defaults["project_structure"].items():
            config["project_structure"].setdefault(name, path)
        return config

    def _write(self, config: Dict[str, Any]) -> None:
        with open(self.config_path, "w", encoding="utf-8") as config_file:
            yaml.safe_dump(config, config_file, default_flow_style=False)

    def update_config(self) -> None:
        self._write(self.config)

    def create_dir_struct(self) -> None:
        for path in self.config["project_structure"].values():
            os.makedirs(path, exist_ok=True)

    def path_for(self, name: str) -> str:
        try:
            return self.config["project_structure"][name]
        except KeyError as e:
            raise ValidationError(f"Workspace has no '{name}' directory") from e

    def _add_component_log(self) -> None:
        """Record this component's log file under the ``logs`` section."""
        logs = self.config.setdefault("logs", {})
        if self.component in logs:
            return
        logs[self.component] = os.path.join(self.path_for("logs"), f"{self.component.lower()}.log")
        self.update_config()

    def load_model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.config.get("model"))

    def load_train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config.get("train"))

    def load_pretrain_config(self) -> PretrainConfig:
        return PretrainConfig.from_dict(self.config.get("pretrain"))

    def load_eval_config(self) -> EvalConfig:
        return EvalConfig.from_dict(self.config.get("eval"))

    def report_settings(self, title: str, settings: Dict[str, Any]) -> None:
        """Log a settings block the way each manager announces itself."""
        width = max((len(key) for key in settings), default=0) + 2
        lines = [f"        {key.upper() + ':':<{width}} {value}" for key, value in settings.items()]
        self.logger.info("\n        " + title + "\n" + "\n".join(lines))
