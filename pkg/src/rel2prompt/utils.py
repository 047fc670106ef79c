import os
import re
import json
import math
import zlib
import logging
from datetime import datetime, timezone

import numpy as np
import pytz
from dateutil import parser


today = datetime.today().strftime('%Y-%m-%d')

logger = logging.getLogger('rel2prompt')

# sentinels for the time mapping; NEG_INF orders below every finite timestamp
NEG_INF = int(np.iinfo(np.int64).min)
POS_INF = int(np.iinfo(np.int64).max)


class _Missing:
    """Explicit marker for an absent cell value."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return 'MISSING'

    def __bool__(self):
        return False

    def __reduce__(self):
        return (_Missing, ())


MISSING = _Missing()


class Utils:

    @staticmethod
    def get_logger(
            LOG_FORMAT     = '%(asctime)s %(name)-12s %(levelname)-8s %(message)s script:%(filename)s line:%(lineno)d',
            LOG_NAME       = 'rel2prompt',
            LOG_DIRECTORY  = 'logs/',
            append_logs    = True,
            console_level  = None):
        """
        Configures and returns a logger with handlers for info, error, and warning levels.

        :param LOG_FORMAT: Format string for log messages.
        :type LOG_FORMAT: str, optional
        :param LOG_NAME: Name of the logger. Defaults to 'rel2prompt'.
        :type LOG_NAME: str, optional
        :param LOG_DIRECTORY: Directory where log files will be saved.
        :type LOG_DIRECTORY: str, optional
        :param append_logs: If True, logs will be appended to existing files, otherwise overwritten.
        :type append_logs: bool, optional
        :param console_level: If set, also log to stderr at this level.
        :type console_level: int, optional
        :return: Configured logger instance.
        :rtype: logging.Logger
        """
        mode = 'a' if append_logs else 'w'

        os.makedirs(LOG_DIRECTORY, exist_ok=True)
        log_file_info = os.path.join(LOG_DIRECTORY, f"info_log_{today}.txt")
        log_file_error = os.path.join(LOG_DIRECTORY, f"error_log_{today}.txt")
        log_file_warning = os.path.join(LOG_DIRECTORY, f"warning_log_{today}.txt")

        log           = logging.getLogger(LOG_NAME)
        log_formatter = logging.Formatter(LOG_FORMAT)

        # a second call (new run directory) replaces the handlers instead of stacking them
        for handler in list(log.handlers):
            log.removeHandler(handler)
            handler.close()

        log_handler_info = logging.FileHandler(log_file_info, mode=mode)
        log_handler_info.setFormatter(log_formatter)
        log_handler_info.setLevel(logging.INFO)
        log.addHandler(log_handler_info)

        error_log_formatter = logging.Formatter('%(asctime)s - %(filename)s - %(message)s')
        log_handler_error = logging.FileHandler(log_file_error, mode=mode)
        log_handler_error.setFormatter(error_log_formatter)
        log_handler_error.setLevel(logging.ERROR)
        log.addHandler(log_handler_error)

        log_handler_warning = logging.FileHandler(log_file_warning, mode=mode)
        log_handler_warning.setFormatter(log_formatter)
        log_handler_warning.setLevel(logging.WARNING)
        log.addHandler(log_handler_warning)

        if console_level is not None:
            console = logging.StreamHandler()
            console.setFormatter(logging.Formatter('%(levelname)s %(message)s'))
            console.setLevel(console_level)
            log.addHandler(console)

        log.setLevel(logging.INFO)

        return log

    @staticmethod
    def parse_timestamp(value):
        """
        Convert a timestamp cell into integer epoch seconds (UTC).

        Integer literals are taken as epoch seconds; anything else goes through dateutil,
        naive datetimes are assumed to be UTC.

        :param value: The raw cell text.
        :type value: str
        :return: Epoch seconds.
        :rtype: int
        :raises ValueError: If the string cannot be parsed.
        """
        text = str(value).strip()
        if re.fullmatch(r'[+-]?\d+', text):
            return int(text)
        dt = parser.parse(text)
        if dt.tzinfo is None:
            dt = dt.replace(tzinfo=pytz.utc)
        else:
            dt = dt.astimezone(pytz.utc)
        return int((dt - datetime(1970, 1, 1, tzinfo=timezone.utc)).total_seconds())

    @staticmethod
    def format_timestamp(epoch_seconds):
        if epoch_seconds == NEG_INF:
            return '-inf'
        if epoch_seconds == POS_INF:
            return '+inf'
        return datetime.fromtimestamp(epoch_seconds, tz=pytz.utc).isoformat().replace('+00:00', 'Z')

    @staticmethod
    def format_value(value):
        """Render a cell value as text; integral floats lose their trailing '.0'."""
        if value is MISSING or value is None:
            return 'missing'
        if isinstance(value, float):
            if math.isfinite(value) and value == int(value) and abs(value) < 1e15:
                return str(int(value))
            return repr(value)
        return str(value)

    @staticmethod
    def json_value(value):
        """JSON-friendly form of a cell value."""
        if value is MISSING or value is None:
            return None
        if isinstance(value, float) and math.isfinite(value) and value == int(value) and abs(value) < 1e15:
            return int(value)
        if isinstance(value, (np.integer,)):
            return int(value)
        if isinstance(value, (np.floating,)):
            return float(value)
        return value

    @staticmethod
    def stable_hash(text, buckets):
        """Process-independent bucket for a token (builtin hash() is salted per process)."""
        return zlib.crc32(text.encode('utf-8')) % buckets

    @staticmethod
    def derive_rng(*keys):
        """
        Counter-based generator keyed by a tuple of non-negative integers.

        The same keys always produce the same stream, regardless of which thread asks.
        """
        entropy = [int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    @staticmethod
    def dump_json(obj, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'w', encoding='utf-8') as file:
            json.dump(obj, file, indent=2, sort_keys=True, default=str)
            file.write('\n')
        logger.info(f"Wrote {path}")

    @staticmethod
    def append_jsonl(row, path):
        with open(path, 'a', encoding='utf-8') as file:
            file.write(json.dumps(row, sort_keys=True) + '\n')
