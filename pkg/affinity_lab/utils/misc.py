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

import hashlib
import os
import sys
from typing import Any, Dict, Optional

import torch
import wandb
from dotenv import load_dotenv
from loguru import logger

load_dotenv()

EVENTS_LEVEL = "EVENTS"


def setup_logging(
    level: str = "INFO",
    out_dir: Optional[str] = None,
    save_events: bool = True,
    events_retention_size: str = "100 MB",
):
    """
    Configures loguru: a console sink at `level` and, optionally, a serialized
    events.log sink in `out_dir` that only records EVENTS-level messages.
    """
    logger.remove()
    logger.add(
        sys.stderr,
        level=level,
        format="<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | {message}",
    )

    try:
        logger.level(EVENTS_LEVEL)
    except ValueError:
        # Add custom event logger for the events.
        logger.level(EVENTS_LEVEL, no=38, icon="📝")

    if save_events and out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        logger.add(
            os.path.join(out_dir, "events.log"),
            rotation=events_retention_size,
            serialize=True,
            enqueue=True,
            backtrace=False,
            diagnose=False,
            level=EVENTS_LEVEL,
            format="{time:YYYY-MM-DD at HH:mm:ss} | {level} | {message}",
        )


def log_event(message: str, **fields: Any):
    try:
        logger.bind(**fields).log(EVENTS_LEVEL, message)
    except ValueError:
        # EVENTS level not registered (logging not set up, e.g. under pytest).
        logger.bind(**fields).info(message)


def derive_seed(master_seed: int, *keys: Any) -> int:
    """
    Child seed = BLAKE2b(master seed, key path), truncated to 63 bits. Independent of call
    order, so per-antigen streams do not depend on how work units are scheduled.
    """
    digest = hashlib.blake2b(digest_size=8)
    digest.update(str(int(master_seed)).encode())
    for key in keys:
        digest.update(b"/")
        digest.update(str(key).encode())
    return int.from_bytes(digest.digest(), "little") & ((1 << 63) - 1)


def make_generator(master_seed: int, *keys: Any) -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(derive_seed(master_seed, *keys) if keys else int(master_seed))
    return generator


def load_wandb(cfg, stage: str):
    """Starts a wandb run for `stage` when cfg.logging.wandb is set, else returns None."""
    if not cfg.logging.wandb:
        return None
    run_name = f"{cfg.run_id}_{stage}_seed{cfg.seed}"
    wandb_run = wandb.init(
        name=run_name,
        anonymous="allow",
        project=cfg.logging.wandb_project,
        entity=cfg.logging.wandb_entity,
        config=cfg.model_dump(),
        mode="online" if os.environ.get("WANDB_API_KEY") else "offline",
        dir=cfg.out,
        reinit=True,
    )
    return wandb_run


def wandb_log(wandb_run, payload: Dict[str, Any], step: Optional[int] = None):
    if wandb_run is not None:
        wandb_run.log(payload, step=step)
