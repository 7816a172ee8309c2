from pathlib import Path

from rest_framework import serializers

from .data import WeightingScheme
from .dwl import WeightingMode

GENERATORS = ['two_moons', 'blobs', 'idx']
IDX_PATH_FIELDS = ['source_images', 'source_labels', 'target_images', 'target_labels']


class DatasetSerializer(serializers.Serializer):
    """Dataset spec: a synthetic generator with its parameters, or IDX paths."""

    generator = serializers.ChoiceField(choices=GENERATORS)
    n_source = serializers.IntegerField(min_value=4, required=False, default=400)
    n_target = serializers.IntegerField(min_value=4, required=False, default=400)
    noise_std = serializers.FloatField(min_value=0.0, required=False, default=0.1)

    # two_moons
    rotation_degrees = serializers.FloatField(required=False, default=30.0)
    translation = serializers.ListField(
        child=serializers.FloatField(), min_length=2, max_length=2, required=False, default=[0.0, 0.0]
    )

    # blobs
    num_classes = serializers.IntegerField(min_value=2, required=False)
    num_features = serializers.IntegerField(min_value=1, required=False, default=2)
    shift = serializers.ListField(child=serializers.FloatField(), required=False)

    # idx
    source_images = serializers.CharField(required=False)
    source_labels = serializers.CharField(required=False)
    target_images = serializers.CharField(required=False)
    target_labels = serializers.CharField(required=False)
    max_source = serializers.IntegerField(min_value=1, required=False, allow_null=True, default=None)
    max_target = serializers.IntegerField(min_value=1, required=False, allow_null=True, default=None)
    image_size = serializers.ListField(
        child=serializers.IntegerField(min_value=1), min_length=2, max_length=2,
        required=False, default=[28, 28]
    )

    def validate(self, attrs):
        generator = attrs['generator']
        if generator == 'idx':
            errors = {}
            for name in IDX_PATH_FIELDS:
                path = attrs.get(name)
                if not path:
                    errors[name] = 'This field is required for the idx generator.'
                elif not Path(path).exists():
                    errors[name] = f'File not found: {path}'
            if errors:
                raise serializers.ValidationError(errors)
            attrs.setdefault('num_classes', 10)
        elif generator == 'blobs':
            attrs.setdefault('num_classes', 3)
            shift = attrs.get('shift')
            if shift is not None and len(shift) != attrs['num_features']:
                raise serializers.ValidationError(
                    {'shift': f"Expected {attrs['num_features']} entries."}
                )
            minimum = 2 * attrs['num_classes']
            if attrs['n_source'] < minimum or attrs['n_target'] < minimum:
                raise serializers.ValidationError(
                    f"Blobs need at least {minimum} samples per domain."
                )
        return attrs


class ModelSpecSerializer(serializers.Serializer):
    feature_dim = serializers.IntegerField(min_value=1, required=False, default=16)
    hidden_dim = serializers.IntegerField(min_value=1, required=False, default=64)
    dropout = serializers.FloatField(min_value=0.0, max_value=0.95, required=False, default=0.0)


class OptimizerSerializer(serializers.Serializer):
    kind = serializers.ChoiceField(choices=['adam', 'sgd'], required=False, default='adam')
    lr = serializers.FloatField(min_value=1e-12, required=False, default=0.0002)
    weight_decay = serializers.FloatField(min_value=0.0, required=False, default=0.0005)
    momentum = serializers.FloatField(min_value=0.0, max_value=0.999, required=False, default=0.9)


class TrainingSerializer(serializers.Serializer):
    epochs = serializers.IntegerField(min_value=1, required=False, default=100)
    warmup_epochs = serializers.IntegerField(min_value=1, required=False, default=5)
    batch_size = serializers.IntegerField(min_value=2, required=False, default=128)
    a = serializers.FloatField(required=False, default=0.5)
    sample_weighting = serializers.BooleanField(required=False, default=True)
    weighting_mode = serializers.ChoiceField(
        choices=[mode.value for mode in WeightingMode], required=False, default='dynamic'
    )
    tau_fixed = serializers.FloatField(min_value=0.0, max_value=1.0, required=False, default=0.5)
    tau_smoothing = serializers.FloatField(min_value=0.0, required=False, default=0.5)
    weighting_scheme = serializers.ChoiceField(
        choices=[scheme.value for scheme in WeightingScheme], required=False, default='sampling'
    )
    eval_subsample = serializers.IntegerField(min_value=2, required=False, default=512)
    lda_eps = serializers.FloatField(min_value=1e-12, required=False, default=1e-5)
    divergence_limit = serializers.FloatField(min_value=1.0, required=False, default=1e6)

    def validate_a(self, value):
        """Sample weighting strength lives in (0, 1]."""
        if not 0.0 < value <= 1.0:
            raise serializers.ValidationError("a must lie in (0, 1].")
        return value

    def validate_tau_smoothing(self, value):
        if value >= 1.0:
            raise serializers.ValidationError("tau_smoothing must lie in [0, 1).")
        return value


class ExperimentConfigSerializer(serializers.Serializer):
    """Validates one experiment configuration document."""

    dataset = DatasetSerializer()
    model = ModelSpecSerializer(required=False, default=dict)
    optimizer = OptimizerSerializer(required=False, default=dict)
    training = TrainingSerializer(required=False, default=dict)
    seed = serializers.IntegerField(min_value=0, required=False, default=0)
    output_dir = serializers.CharField(required=False, default='runs/default')
    export_dataset = serializers.BooleanField(required=False, default=False)
    checkpoint_every = serializers.IntegerField(min_value=0, required=False, default=0)

    def validate(self, attrs):
        # Nested defaults are only applied when the section is present
        for name, serializer_class in (('model', ModelSpecSerializer),
                                       ('optimizer', OptimizerSerializer),
                                       ('training', TrainingSerializer)):
            section = attrs.get(name) or {}
            if not section:
                nested = serializer_class(data={})
                nested.is_valid(raise_exception=True)
                attrs[name] = dict(nested.validated_data)
        return attrs
