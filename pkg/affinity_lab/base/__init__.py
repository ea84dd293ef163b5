from .stage import BaseStage
