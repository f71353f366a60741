"""Biological age estimation from health check-up records."""
from .cohort import CohortTable, GeneratorConfig, generate_cohort
from .estimates import BaEstimate
from .schema import Schema, default_schema

__version__ = "0.1.0"
__all__ = ["CohortTable", "GeneratorConfig", "generate_cohort", "BaEstimate", "Schema", "default_schema"]
