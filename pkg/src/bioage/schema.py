"""Feature registry for health check-up cohorts.

Every biomarker a cohort may carry is declared here with its unit, normal
range, disease tags and expected missing rate. The ``kind`` field drives
feature-set construction: age-derived and impedance-derived features are
kept in the registry (they are part of a check-up) but screened out of the
modelling sets.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

DISEASES = ("dm", "hbp", "dlp", "ms", "cancer", "cvd", "cva")
TRISTATE_DISEASES = ("dm", "hbp", "dlp")
BINARY_DISEASES = ("ms", "cancer", "cvd", "cva")

KINDS = (
    "measured",
    "ca_derived",
    "impedance",
    "categorical",
    "tumor_marker",
    "eyesight",
)


@dataclass(frozen=True)
class Feature:
    name: str
    unit: str
    normal_low: float
    normal_high: float
    diseases: tuple[str, ...] = ()
    missing_rate: float = 0.0
    kind: str = "measured"
    description: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if not 0.0 <= self.missing_rate <= 1.0:
            raise ValueError(f"feature {self.name!r}: missing_rate outside [0, 1]")
        unknown = set(self.diseases) - set(DISEASES)
        if unknown:
            raise ValueError(f"feature {self.name!r}: unknown disease tags {sorted(unknown)}")


@dataclass
class Schema:
    """Ordered collection of :class:`Feature` keyed by name."""

    features: list[Feature] = field(default_factory=list)

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ValueError("duplicate feature names in schema")
        self._index = {f.name: f for f in self.features}

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __getitem__(self, name: str) -> Feature:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"feature {name!r} is not in the schema registry") from None

    def __iter__(self) -> Iterator[Feature]:
        return iter(self.features)

    def __len__(self) -> int:
        return len(self.features)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    def tagged(self, disease: str) -> list[str]:
        """Names of the features tagged with ``disease``, in schema order."""
        return [f.name for f in self.features if disease in f.diseases]

    def of_kind(self, *kinds: str) -> list[str]:
        return [f.name for f in self.features if f.kind in kinds]

    def subset(self, names: Iterable[str]) -> "Schema":
        keep = set(names)
        return Schema([f for f in self.features if f.name in keep])

    def to_dict(self) -> dict:
        return {"features": [asdict(f) for f in self.features]}

    @classmethod
    def from_dict(cls, data: dict) -> "Schema":
        feats = []
        for item in data["features"]:
            item = dict(item)
            item["diseases"] = tuple(item.get("diseases", ()))
            feats.append(Feature(**item))
        return cls(feats)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Schema":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


# name, unit, normal_low, normal_high, diseases, missing_rate, kind
_DEFAULT_FEATURES = [
    # disease-related (the eight features behind the average-group rule)
    ("FBS", "mg/dL", 70, 100, ("dm", "ms"), 0.02, "measured"),
    ("HbA1c", "%", 4.0, 5.7, ("dm",), 0.05, "measured"),
    ("SBP", "mmHg", 90, 120, ("hbp", "ms"), 0.01, "measured"),
    ("DBP", "mmHg", 60, 80, ("hbp", "ms"), 0.01, "measured"),
    ("LDLC", "mg/dL", 50, 100, ("dlp",), 0.05, "measured"),
    ("TG", "mg/dL", 50, 150, ("dlp", "ms"), 0.03, "measured"),
    ("HDLC", "mg/dL", 60, 100, ("dlp", "ms"), 0.03, "measured"),
    ("WC", "cm", 70, 90, ("ms",), 0.02, "measured"),
    # remaining base features
    ("RBC", "10^6/uL", 4.2, 5.9, (), 0.02, "measured"),
    ("MCV", "fL", 80, 100, (), 0.02, "measured"),
    ("BMI", "kg/m^2", 18.5, 23.0, (), 0.03, "measured"),
    ("SMM", "kg", 20, 40, (), 0.10, "measured"),
    ("BFM", "kg", 8, 20, (), 0.10, "measured"),
    ("FFM", "kg", 35, 70, (), 0.10, "measured"),
    ("hsCRP", "mg/L", 0.0, 1.0, (), 0.15, "measured"),
    ("Cr", "mg/dL", 0.6, 1.2, (), 0.02, "measured"),
    ("FEV1", "L", 2.0, 4.5, (), 0.20, "measured"),
    ("FVC", "L", 2.5, 5.5, (), 0.20, "measured"),
    ("Alb", "g/dL", 3.5, 5.2, (), 0.03, "measured"),
    # other check-up measurements
    ("Height", "cm", 150, 190, (), 0.01, "measured"),
    ("BUN", "mg/dL", 8, 20, (), 0.03, "measured"),
    ("Hb", "g/dL", 12, 17, (), 0.02, "measured"),
    ("WBC", "10^3/uL", 4, 10, (), 0.02, "measured"),
    ("PLT", "10^3/uL", 150, 400, (), 0.02, "measured"),
    ("TChol", "mg/dL", 120, 200, (), 0.03, "measured"),
    ("AST", "U/L", 0, 40, (), 0.02, "measured"),
    ("ALT", "U/L", 0, 40, (), 0.02, "measured"),
    ("GGT", "U/L", 0, 60, (), 0.03, "measured"),
    ("UricAcid", "mg/dL", 3, 7, (), 0.05, "measured"),
    ("Calcium", "mg/dL", 8.5, 10.5, (), 0.10, "measured"),
    ("FEV1_FVC", "%", 70, 100, (), 0.20, "measured"),
    ("Pulse", "bpm", 60, 100, (), 0.02, "measured"),
    ("CEA", "ng/mL", 0, 5, (), 0.55, "tumor_marker"),
    ("AFP", "ng/mL", 0, 10, (), 0.60, "tumor_marker"),
    ("VisualAcuity", "decimal", 0.8, 1.5, (), 0.30, "eyesight"),
    ("HPylori", "positive", 0, 0, (), 0.40, "categorical"),
    # bioelectrical impedance estimates
    ("VFA", "cm^2", 0, 100, (), 0.10, "impedance"),
    ("AbdominalFatness", "ratio", 0.75, 0.9, (), 0.10, "impedance"),
    ("ICF", "L", 15, 30, (), 0.10, "impedance"),
    ("Mineral", "kg", 2, 5, (), 0.10, "impedance"),
    ("Protein", "kg", 7, 14, (), 0.10, "impedance"),
    # formulas that take chronological age as an input
    ("eGFR_CKDEPI", "mL/min/1.73m^2", 90, 150, (), 0.02, "ca_derived"),
    ("eGFR_MDRD", "mL/min/1.73m^2", 90, 150, (), 0.02, "ca_derived"),
    ("FVC_pct", "%", 80, 120, (), 0.20, "ca_derived"),
    ("FEV1_pct", "%", 80, 120, (), 0.20, "ca_derived"),
]


def default_schema() -> Schema:
    return Schema(
        [
            Feature(name, unit, float(lo), float(hi), tuple(dis), float(miss), kind)
            for name, unit, lo, hi, dis, miss, kind in _DEFAULT_FEATURES
        ]
    )
