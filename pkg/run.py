#!/usr/bin/env python3
"""
Entry point for the avt command line
Loads .env, sets up logging and maps failures to exit codes
"""

import sys
import os
import logging
from pathlib import Path
from typing import Optional, Sequence

# Add the project root to Python path
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

# .env must be loaded before config reads the environment
try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass


def setup_logging():
    """Setup basic logging configuration"""
    log_level = os.getenv("LOG_LEVEL", "INFO").upper()

    logging.basicConfig(
        level=getattr(logging, log_level, logging.INFO),
        format='%(asctime)s | %(levelname)s | %(name)s | %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S',
        stream=sys.stderr,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one subcommand

    Returns:
        0 on success, 2 for invalid input or configuration, 3 for other
        runtime failures, 4 for numerical failures, 130 when interrupted
    """
    setup_logging()
    logger = logging.getLogger(__name__)

    from commands import dispatch
    from errors import AVTError

    try:
        return dispatch(argv)
    except KeyboardInterrupt:
        print("\n🛑 Interrupted", file=sys.stderr)
        return 130
    except AVTError as e:
        logger.error(f"{type(e).__name__}: {e}", exc_info=logger.isEnabledFor(logging.DEBUG))
        print(f"❌ {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.error(f"Fatal error: {e}", exc_info=True)
        print(f"❌ Fatal error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
