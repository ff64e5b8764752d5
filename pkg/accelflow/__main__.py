import sys

from accelflow.main import main

sys.exit(main())
