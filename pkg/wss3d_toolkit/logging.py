# WSS3D Toolkit
# Licensed under the GNU General Public License v3.0 [see LICENSE for details]

"""Functions for logging."""

import logging
import sys

_FORMAT = '%(asctime)s: %(message)s'
_DATE_FORMAT = '%Y-%m-%d %H:%M:%S'


def get_logger(log_file=None):
  """Gets the root logger, writing to stdout and optionally to a file.

  Handlers installed by an earlier call are replaced, so a stage can redirect
  its log file without duplicating stdout lines.

  Args:
    log_file: Path to the log file, or None for stdout only.

  Returns:
    A logger.
  """
  logger = logging.getLogger()
  logger.setLevel(logging.INFO)

  for h in list(logger.handlers):
    if getattr(h, '_wss3d', False):
      logger.removeHandler(h)
      h.close()

  formatter = logging.Formatter(_FORMAT, _DATE_FORMAT)

  stdout_handler = logging.StreamHandler(sys.stdout)
  stdout_handler.setLevel(logging.INFO)
  stdout_handler.setFormatter(formatter)
  stdout_handler._wss3d = True
  logger.addHandler(stdout_handler)

  if log_file is not None:
    file_handler = logging.FileHandler(log_file, mode='w')
    file_handler.setLevel(logging.INFO)
    file_handler.setFormatter(formatter)
    file_handler._wss3d = True
    logger.addHandler(file_handler)

  return logger
