class CloudFuseError(Exception):
    """
    Base class for every error raised by cloudfuse.
    """

    pass


class ShapeError(CloudFuseError, ValueError):
    """
    Tensor or image shapes don't fit together.
    """

    pass


class GraphError(CloudFuseError):
    """
    The gradient graph was used outside its one-forward, one-backward contract.
    """

    pass


class LabelRangeError(CloudFuseError, ValueError):
    """
    A class label lies outside [0, n_classes).
    """

    def __init__(self, coordinate, label, n_classes):
        super(LabelRangeError, self).__init__(
            "Label %d at pixel %r is outside [0, %d)" % (label, coordinate, n_classes)
        )
        self.coordinate = coordinate
        self.label = label
        self.n_classes = n_classes


class NonFiniteGradientError(CloudFuseError):
    """
    An optimizer step was handed a NaN or infinite gradient.
    """

    def __init__(self, param_name):
        super(NonFiniteGradientError, self).__init__(
            "Non-finite gradient for parameter %r" % param_name
        )
        self.param_name = param_name


class TrainingDivergedError(CloudFuseError):
    """
    The training loss became NaN or infinite.
    """

    def __init__(self, epoch, batch, loss):
        super(TrainingDivergedError, self).__init__(
            "Non-finite loss %r at epoch %d, batch %d" % (loss, epoch, batch)
        )
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


class CalibrationError(CloudFuseError, ValueError):
    """
    Calibration parameters can't be fitted or aren't usable.
    """

    pass


class TileRangeError(CloudFuseError, ValueError):
    """
    A coordinate or tile index lies outside Web-Mercator space.
    """

    pass


class DatasetError(CloudFuseError):
    """
    A dataset can't be generated, loaded or sampled as asked.
    """

    pass


class NetPBMFormatError(CloudFuseError):
    """
    A NetPBM file is malformed or of an unsupported flavour.
    """

    def __init__(self, path, reason):
        super(NetPBMFormatError, self).__init__("%s: %s" % (path, reason))
        self.path = path
        self.reason = reason


class CheckpointError(CloudFuseError):
    """
    A checkpoint file is malformed or doesn't match the network it's loaded into.
    """

    def __init__(self, path, reason):
        super(CheckpointError, self).__init__("%s: %s" % (path, reason))
        self.path = path
        self.reason = reason


class ConfigError(CloudFuseError):
    """
    Configuration values didn't validate. `reasons` maps field name to message.
    """

    def __init__(self, reasons):
        super(ConfigError, self).__init__(
            "; ".join("%s: %s" % (k, v) for k, v in sorted(reasons.items()))
        )
        self.reasons = reasons


class MissingFileError(CloudFuseError, FileNotFoundError):
    """
    A required input file doesn't exist.
    """

    def __init__(self, path):
        super(MissingFileError, self).__init__("No such file: %s" % path)
        self.path = str(path)


class UsageError(CloudFuseError):
    """
    The command line couldn't be parsed.
    """

    pass


class ExitCodeDescriptions(object):
    _descriptions = {
        0: ("ok", "The command completed successfully."),
        1: ("failure", "The command failed for a reason not covered by another code."),
        2: ("usage", "Unknown flag, missing argument or otherwise malformed command line."),
        3: ("missing-file", "A required input file (dataset, checkpoint, config) is missing."),
        4: ("invalid-config", "The config file or a flag holds an invalid value."),
        5: ("diverged", "Training produced a non-finite loss or gradient."),
    }

    def __getitem__(self, key):
        if not isinstance(key, int):
            raise KeyError("'key' must be an integer")
        return self._descriptions[key]

    def category(self, key):
        return self[key][0]

    def for_exception(self, exc):
        """
        Map an exception raised by a command to its exit code.
        """
        if isinstance(exc, UsageError):
            return 2
        if isinstance(exc, MissingFileError):
            return 3
        if isinstance(exc, ConfigError):
            return 4
        if isinstance(exc, (TrainingDivergedError, NonFiniteGradientError)):
            return 5
        return 1


EXIT_CODE_DESCRIPTIONS = ExitCodeDescriptions()
