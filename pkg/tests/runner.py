import unittest
from . import test_augment
from . import test_cli
from . import test_data
from . import test_dbutil
from . import test_gee
from . import test_pipeline
from . import test_randomize
from . import test_regression
from . import test_select
from . import test_simulate
from . import test_utils
from . import test_worker

# initialize the test suite
loader = unittest.TestLoader()
suite = unittest.TestSuite()

# add tests to the test suite, bottom-up
for module in (test_utils, test_data, test_regression, test_gee, test_augment, test_randomize,
               test_select, test_pipeline, test_simulate, test_dbutil, test_worker, test_cli):
    suite.addTests(loader.loadTestsFromModule(module))

# initialize a runner, pass it your suite and run it
runner = unittest.TextTestRunner(verbosity=3)
result = runner.run(suite)
