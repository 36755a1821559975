from .engine import DevelopResult, Developer, DevelopmentOutcome, SearchSpace

__all__ = ["DevelopResult", "Developer", "DevelopmentOutcome", "SearchSpace"]
