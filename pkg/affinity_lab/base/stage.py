# The MIT License (MIT)
# Copyright © 2024 affinity_lab developers

# Permission is hereby granted, free of charge, to any person obtaining a copy of this software and associated
# documentation files (the “Software”), to deal in the Software without restriction, including without limitation
# the rights to use, copy, modify, merge, publish, distribute, sublicense, and/or sell copies of the Software,
# and to permit persons to whom the Software is furnished to do so, subject to the following conditions:

# The above copyright notice and this permission notice shall be included in all copies or substantial portions of
# the Software.

# THE SOFTWARE IS PROVIDED “AS IS”, WITHOUT WARRANTY OF ANY KIND, EXPRESS OR IMPLIED, INCLUDING BUT NOT LIMITED TO
# THE WARRANTIES OF MERCHANTABILITY, FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL
# THE AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER LIABILITY, WHETHER IN AN ACTION
# OF CONTRACT, TORT OR OTHERWISE, ARISING FROM, OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER
# DEALINGS IN THE SOFTWARE.


from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Dict, Optional

import torch
from loguru import logger

from affinity_lab import __spec_version__ as spec_version
from affinity_lab.data.dataset import ToyDataset
from affinity_lab.utils.config import ExperimentConfig, check_config, dump_config
from affinity_lab.utils.misc import load_wandb, make_generator, setup_logging
from affinity_lab.utils.progress_tracker import LossCurve
from affinity_lab.utils.state_loader import data_hash, save_checkpoint


class BaseStage(ABC):
    """
    Base class for the pipeline stages. This class is abstract and should be inherited by a
    subclass. It resolves the output directory, sets up logging and experiment tracking, and
    gives stages one way to reach the dataset, their random streams and the checkpoint folder.
    """

    stage_name: str = "BaseStage"
    spec_version: int = spec_version

    def __init__(self, config: ExperimentConfig):
        self.config = config
        check_config(self.config)

        # Set up logging with the provided configuration and directory.
        setup_logging(
            level=self.config.logging.level,
            out_dir=self.config.out,
            save_events=not self.config.logging.dont_save_events,
            events_retention_size=self.config.logging.events_retention_size,
        )
        dump_config(self.config, Path(self.config.out) / "config.yaml")
        logger.info(f"Stage {self.stage_name} (spec {self.spec_version}) writing to {self.config.out}")
        logger.debug(self.config.model_dump())

        self.wandb = load_wandb(self.config, self.stage_name)
        self._dataset: Optional[ToyDataset] = None

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        if self.wandb is not None:
            self.wandb.finish()

    @abstractmethod
    def run(self):
        ...

    @property
    def out_dir(self) -> Path:
        return Path(self.config.out)

    @property
    def dataset(self) -> ToyDataset:
        if self._dataset is None:
            self._dataset = ToyDataset.load(self.config.data_dir)
        return self._dataset

    def generator(self, *keys: Any) -> torch.Generator:
        """A random stream private to this stage and key path."""
        return make_generator(self.config.seed, self.stage_name, *keys)

    def save_model(self, model: torch.nn.Module, name: str, extra: Optional[Dict[str, Any]] = None) -> Path:
        return save_checkpoint(
            model,
            Path(self.config.checkpoint_dir) / f"{name}.aflb",
            training_seed=self.config.seed,
            data_hash=data_hash(self.config.data_dir),
            extra=extra,
        )

    def save_curve(self, curve: LossCurve):
        curve.save(self.out_dir / "curves")
