import hashlib
import json
import logging
import re
from collections.abc import Mapping

from rest_framework import serializers

from analysis.image_stats import STATISTICS
from sampling.toy_diffusion import DEFAULT_IMAGE_SHAPE

from .models import ExperimentRun, RunArtifact

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MAX_SEED = 2**64 - 1

KINDS = [kind for kind, _ in ExperimentRun.KIND_CHOICES]
PRESETS = ["gaussian", "symmetric", "multimodal", "explicit"]
PROTOCOLS = ["PN", "RR", "MASKED"]
DEFAULT_METHODS = ["MC", "AMC(k=2)", "AMC(k=8)", "RQMC"]
DEFAULT_STATISTICS = ["mean_pixel", "brightness", "contrast", "centroid_row"]

METHOD_PATTERN = re.compile(r"^(?:MC|RQMC|AMC\(k=(\d+)\))$")


def method_k(method):
    """Block size of an AMC(k=K) tag, None for MC and RQMC."""
    match = METHOD_PATTERN.match(method)
    return int(match.group(1)) if match and match.group(1) else None


def is_power_of_two(n):
    return n >= 1 and not n & (n - 1)


class StrictFieldsMixin:
    """
    Reject keys the serializer does not declare. Nested serializers carry the
    mixin too, so a typo anywhere in an experiment config is an error.
    """

    def to_internal_value(self, data):
        if isinstance(data, Mapping):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                raise serializers.ValidationError({key: ["Unknown field."] for key in unknown})
        return super().to_internal_value(data)


class StrictSerializer(StrictFieldsMixin, serializers.Serializer):
    pass


def section_defaults(serializer_class):
    """Validated data of an empty section, i.e. every field at its default."""
    serializer = serializer_class(data={})
    serializer.is_valid(raise_exception=True)
    return serializer.validated_data


# ── Model sections ───────────────────────────────────────────────────────


class MixtureSerializer(StrictSerializer):
    """
    Serializer for a Gaussian-mixture spec: a preset, or explicit parameters.
    """

    preset = serializers.ChoiceField(choices=PRESETS, default="symmetric")
    d = serializers.IntegerField(min_value=1, required=False)
    std = serializers.FloatField(required=False)
    offset = serializers.FloatField(default=1.0)
    components = serializers.IntegerField(min_value=1, default=4)
    shift = serializers.FloatField(default=0.0)
    weights = serializers.ListField(child=serializers.FloatField(), required=False)
    means = serializers.ListField(
        child=serializers.ListField(child=serializers.FloatField()), required=False
    )
    stds = serializers.ListField(child=serializers.FloatField(), required=False)

    def validate_std(self, value):
        if value <= 0:
            raise serializers.ValidationError("Component std must be positive.")
        return value

    def validate(self, attrs):
        explicit_fields = ("weights", "means", "stds")
        if attrs["preset"] == "explicit":
            missing = [name for name in explicit_fields if name not in attrs]
            if missing:
                raise serializers.ValidationError(
                    {name: "Required for explicit mixtures." for name in missing}
                )
        else:
            given = [name for name in explicit_fields if name in attrs]
            if given:
                raise serializers.ValidationError(
                    {name: "Only explicit mixtures take component lists." for name in given}
                )
        return attrs


class ScheduleSerializer(StrictSerializer):
    T = serializers.IntegerField(min_value=1, default=1000)
    beta_min = serializers.FloatField(default=1e-4)
    beta_max = serializers.FloatField(default=0.02)
    steps = serializers.IntegerField(min_value=1, allow_null=True, default=50)
    alpha_bar = serializers.ListField(child=serializers.FloatField(), required=False, min_length=2)

    def validate(self, attrs):
        if not 0.0 < attrs["beta_min"] <= attrs["beta_max"] < 1.0:
            raise serializers.ValidationError({"beta_max": "Require 0 < beta_min <= beta_max < 1."})
        levels = len(attrs["alpha_bar"]) - 1 if "alpha_bar" in attrs else attrs["T"]
        if attrs["steps"] is not None and attrs["steps"] > levels:
            raise serializers.ValidationError(
                {"steps": f"Cannot respace {levels} levels into {attrs['steps']} steps."}
            )
        return attrs


class ModelSpecSerializer(StrictSerializer):
    image_shape = serializers.ListField(
        child=serializers.IntegerField(min_value=1),
        min_length=3,
        max_length=3,
        default=lambda: list(DEFAULT_IMAGE_SHAPE),
    )
    mixture = MixtureSerializer(required=False)
    schedule = ScheduleSerializer(required=False)
    sampler = serializers.ChoiceField(choices=["ddim", "ddpm"], default="ddim")
    eta = serializers.FloatField(min_value=0.0, default=1.0)

    def validate(self, attrs):
        attrs.setdefault("mixture", section_defaults(MixtureSerializer))
        attrs.setdefault("schedule", section_defaults(ScheduleSerializer))
        d = attrs["image_shape"][0] * attrs["image_shape"][1] * attrs["image_shape"][2]
        if attrs["mixture"].get("d", d) != d:
            raise serializers.ValidationError(
                {"mixture": {"d": f"Image shape {attrs['image_shape']} fixes d = {d}."}}
            )
        return attrs


# ── Design and kind-specific sections ────────────────────────────────────


class SplitSerializer(StrictSerializer):
    R = serializers.IntegerField()
    n = serializers.IntegerField()

    def validate_R(self, value):
        if value < 2:
            raise serializers.ValidationError("At least two replicates are needed for a variance.")
        return value

    def validate_n(self, value):
        if not is_power_of_two(value):
            raise serializers.ValidationError("Points per replicate must be a power of two.")
        return value


class DesignSerializer(StrictSerializer):
    pairs = serializers.IntegerField(min_value=2, default=1000)
    protocols = serializers.ListField(
        child=serializers.ChoiceField(choices=PROTOCOLS),
        min_length=1,
        default=lambda: ["PN", "RR"],
    )
    mask = serializers.ChoiceField(choices=["upper_half", "first_half"], default="upper_half")
    budget = serializers.IntegerField(min_value=2, default=3200)
    methods = serializers.ListField(
        child=serializers.CharField(), min_length=1, default=lambda: list(DEFAULT_METHODS)
    )
    R = serializers.IntegerField(min_value=1, default=25)
    n = serializers.IntegerField(min_value=1, default=128)
    splits = serializers.ListField(child=SplitSerializer(), default=list)
    randomization = serializers.ChoiceField(
        choices=["owen_scramble", "digital_shift"], default="owen_scramble"
    )

    def validate_protocols(self, value):
        if len(set(value)) != len(value):
            raise serializers.ValidationError("Protocols must not repeat.")
        return value

    def validate_methods(self, value):
        for method in value:
            if not METHOD_PATTERN.match(method):
                raise serializers.ValidationError(
                    f"Unknown method {method!r}; use MC, AMC(k=K) or RQMC."
                )
            k = method_k(method)
            if k is not None and k < 2:
                raise serializers.ValidationError(f"{method} needs K >= 2.")
        if len(set(value)) != len(value):
            raise serializers.ValidationError("Methods must not repeat.")
        return value


class SymmetrySerializer(StrictSerializer):
    steps = serializers.ListField(child=serializers.IntegerField(min_value=1), default=list)
    coords = serializers.ListField(
        child=serializers.IntegerField(min_value=0), min_length=1, default=lambda: [0]
    )
    grid_size = serializers.IntegerField(default=201)
    anchors = serializers.IntegerField(min_value=1, default=1)
    average = serializers.BooleanField(default=False)
    pairs = serializers.IntegerField(min_value=2, default=200)
    probe_count = serializers.IntegerField(min_value=1, default=256)
    parameterization = serializers.ChoiceField(choices=["eps", "score"], default="eps")

    def validate_grid_size(self, value):
        if value < 3 or value % 2 == 0:
            raise serializers.ValidationError("Grid size must be odd and at least 3.")
        return value


def _default_ou_mixture():
    return {**section_defaults(MixtureSerializer), "d": 1}


def _default_symmetry_mixture():
    return {**section_defaults(MixtureSerializer), "d": 2}


class OUSerializer(StrictSerializer):
    mixture = MixtureSerializer(required=False)
    t_grid = serializers.ListField(
        child=serializers.FloatField(min_value=0.0),
        min_length=1,
        default=lambda: [round(0.1 * i, 1) for i in range(1, 21)],
    )
    max_degree = serializers.IntegerField(min_value=0, default=10)
    quadrature_order = serializers.IntegerField(min_value=1, default=60)
    symmetry_mixture = MixtureSerializer(required=False)
    reflection = serializers.ChoiceField(choices=["central", "swap"], default="central")
    strict = serializers.BooleanField(default=True)
    symmetry_times = serializers.ListField(
        child=serializers.FloatField(min_value=0.0),
        min_length=1,
        default=lambda: [round(0.1 * i, 1) for i in range(1, 31)],
    )
    symmetry_probes = serializers.IntegerField(min_value=1, default=64)
    bound_times = serializers.ListField(
        child=serializers.FloatField(), default=lambda: [0.25, 0.5, 1.0, 2.0]
    )
    bound_delta = serializers.FloatField(default=0.05)
    bound_samples = serializers.IntegerField(min_value=2, default=20000)

    def validate(self, attrs):
        attrs.setdefault("mixture", _default_ou_mixture())
        attrs.setdefault("symmetry_mixture", _default_symmetry_mixture())
        errors = {}
        if attrs["mixture"].get("d", 1) != 1:
            errors["mixture"] = {"d": "Spectral checks run on one-dimensional mixtures."}
        if attrs["quadrature_order"] < max(2 * attrs["max_degree"], 1):
            errors["quadrature_order"] = "Use at least twice the maximum degree."
        if attrs["bound_delta"] <= 0 or any(t < attrs["bound_delta"] for t in attrs["bound_times"]):
            errors["bound_delta"] = "Require 0 < bound_delta <= every bound time."
        if errors:
            raise serializers.ValidationError(errors)
        return attrs


class FKGSerializer(StrictSerializer):
    chains = serializers.IntegerField(min_value=1, default=100)
    depth = serializers.IntegerField(min_value=1, default=4)
    weight_scale = serializers.FloatField(default=1.0)
    samples = serializers.IntegerField(min_value=1000, default=100000)
    maps = serializers.IntegerField(min_value=0, default=100)
    map_dim = serializers.IntegerField(min_value=1, default=4)
    dim = serializers.IntegerField(min_value=1, default=2)
    mixture = MixtureSerializer(required=False)
    probes = serializers.IntegerField(min_value=1, default=512)
    steps = serializers.ListField(child=serializers.IntegerField(min_value=1), default=list)
    step_counts = serializers.ListField(
        child=serializers.IntegerField(min_value=1), default=lambda: [1, 2, 5, 10, 20, 50]
    )

    def validate_weight_scale(self, value):
        if value <= 0:
            raise serializers.ValidationError("Weight scale must be positive.")
        return value

    def validate(self, attrs):
        attrs.setdefault("mixture", {**section_defaults(MixtureSerializer), "d": attrs["dim"]})
        if attrs["mixture"].get("d", attrs["dim"]) != attrs["dim"]:
            raise serializers.ValidationError({"mixture": {"d": "Must match fkg.dim."}})
        return attrs


# ── Experiment config ────────────────────────────────────────────────────


class ExperimentConfigSerializer(StrictSerializer):
    """
    Versioned experiment config. Unknown keys, a missing seed and inconsistent
    budgets are rejected with field-level messages.
    """

    schema_version = serializers.IntegerField()
    kind = serializers.ChoiceField(choices=KINDS)
    seed = serializers.IntegerField(min_value=0, max_value=MAX_SEED)
    output_dir = serializers.CharField(required=False)
    model = ModelSpecSerializer(required=False)
    design = DesignSerializer(required=False)
    statistics = serializers.ListField(
        child=serializers.ChoiceField(choices=sorted(STATISTICS)),
        min_length=1,
        default=lambda: list(DEFAULT_STATISTICS),
    )
    alpha = serializers.FloatField(default=0.05)
    symmetry = SymmetrySerializer(required=False)
    ou = OUSerializer(required=False)
    fkg = FKGSerializer(required=False)

    def validate_schema_version(self, value):
        if value != SCHEMA_VERSION:
            raise serializers.ValidationError(
                f"Unsupported schema version {value}; expected {SCHEMA_VERSION}."
            )
        return value

    def validate_alpha(self, value):
        if not 0.0 < value < 1.0:
            raise serializers.ValidationError("alpha must lie strictly between 0 and 1.")
        return value

    def validate(self, attrs):
        attrs.setdefault("model", section_defaults(ModelSpecSerializer))
        attrs.setdefault("design", section_defaults(DesignSerializer))
        attrs.setdefault("symmetry", section_defaults(SymmetrySerializer))
        attrs.setdefault("ou", section_defaults(OUSerializer))
        fkg = attrs.get("fkg")
        if fkg is None:
            attrs["fkg"] = section_defaults(FKGSerializer)

        self._validate_statistics(attrs)
        kind = attrs["kind"]
        if kind == "uq":
            self._validate_uq_budget(attrs["design"])
        elif kind == "qmc_tradeoff":
            self._validate_splits(attrs["design"])
        elif kind == "symmetry":
            self._validate_symmetry(attrs)
        elif kind == "fkg":
            self._validate_step_counts(attrs)
        return attrs

    def _validate_statistics(self, attrs):
        channels, height, _ = attrs["model"]["image_shape"]
        if "brightness" in attrs["statistics"] and channels != 3:
            raise serializers.ValidationError(
                {"statistics": "brightness needs an image shape with 3 channels."}
            )
        if "contrast" in attrs["statistics"] and height < 2:
            raise serializers.ValidationError(
                {"statistics": "contrast needs an image height of at least 2."}
            )

    def _validate_uq_budget(self, design):
        budget = design["budget"]
        errors = {}
        for method in design["methods"]:
            k = method_k(method)
            if k is not None and (budget % k or budget // k < 2):
                errors["budget"] = f"{method} needs a budget divisible by {k} with two blocks."
            if method == "RQMC":
                if design["R"] < 2:
                    errors["R"] = "RQMC needs at least two replicates."
                if not is_power_of_two(design["n"]):
                    errors["n"] = "RQMC points per replicate must be a power of two."
                if design["R"] * design["n"] != budget:
                    errors["budget"] = (
                        f"RQMC needs R * n == budget, got {design['R'] * design['n']} != {budget}."
                    )
        if errors:
            raise serializers.ValidationError({"design": errors})

    def _validate_splits(self, design):
        if not design["splits"]:
            raise serializers.ValidationError({"design": {"splits": "List at least one split."}})
        for split in design["splits"]:
            if split["R"] * split["n"] != design["budget"]:
                raise serializers.ValidationError(
                    {
                        "design": {
                            "splits": f"{split['R']} x {split['n']} does not match the budget "
                            f"{design['budget']}."
                        }
                    }
                )

    def _validate_symmetry(self, attrs):
        channels, height, width = attrs["model"]["image_shape"]
        d = channels * height * width
        if any(coord >= d for coord in attrs["symmetry"]["coords"]):
            raise serializers.ValidationError(
                {"symmetry": {"coords": f"Coordinates must be below d = {d}."}}
            )

    def _validate_step_counts(self, attrs):
        schedule = attrs["model"]["schedule"]
        levels = len(schedule["alpha_bar"]) - 1 if "alpha_bar" in schedule else schedule["T"]
        if any(count > levels for count in attrs["fkg"]["step_counts"]):
            raise serializers.ValidationError(
                {"fkg": {"step_counts": f"Step counts cannot exceed {levels}."}}
            )


def canonical_config(validated_data):
    """Plain, key-sorted JSON form of a validated config, without its output_dir."""
    data = json.loads(json.dumps(validated_data))
    data.pop("output_dir", None)
    return data


def config_hash(validated_data):
    encoded = json.dumps(canonical_config(validated_data), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(encoded.encode("utf-8")).hexdigest()


# ── Output representations ───────────────────────────────────────────────


class EstimatorReportSerializer(serializers.Serializer):
    """
    Read-only representation of an EstimatorReport for report JSON.
    """

    method = serializers.CharField()
    estimate = serializers.FloatField()
    ci_lo = serializers.FloatField()
    ci_hi = serializers.FloatField()
    half_width = serializers.FloatField()
    variance_estimate = serializers.FloatField()
    budget = serializers.IntegerField()
    confidence = serializers.FloatField()
    units = serializers.IntegerField()
    rho_hat = serializers.FloatField(allow_null=True)


class RunArtifactSerializer(serializers.ModelSerializer):
    class Meta:
        model = RunArtifact
        fields = ("path", "sha256", "size_bytes")


class ExperimentRunSerializer(serializers.ModelSerializer):
    artifacts = RunArtifactSerializer(many=True, read_only=True)

    class Meta:
        model = ExperimentRun
        fields = (
            "id",
            "kind",
            "config_hash",
            "seed",
            "output_dir",
            "status",
            "exit_code",
            "error",
            "artifacts",
            "created_at",
            "finished_at",
        )
        read_only_fields = fields
