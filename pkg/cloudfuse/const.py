EPS_CLAMP = 1e-7
EPS_DICE = 1.0

DEFAULT_N_CLASSES = 6
DEFAULT_ZOOM = 13
# West, south, east, north around Delaware.
DEFAULT_BBOX = (-75.79, 38.45, -75.05, 39.84)
MAX_MERCATOR_LAT = 85.0511287798

COVERAGE_MIN = 0.10
COVERAGE_MAX = 0.50
COVERAGE_ATTEMPTS = 50

PLATT_MAX_ITER = 100
PLATT_TOL = 1e-8
PLATT_MAX_POINTS = 10 ** 6

THREADS_ENV = "CLOUDFUSE_THREADS"
RUN_MANIFEST_NAME = "run_manifest.json"
