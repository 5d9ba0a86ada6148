import unittest
from candidate import Calculator


class TestCalculatorAdd(unittest.TestCase):
    def test_add_1(self):
        self.assertEqual(Calculator().add(1, 2), 3)

    def test_add_2(self):
        self.assertEqual(Calculator().add(-1, 1), 0)


class TestCalculatorSubtract(unittest.TestCase):
    def test_subtract_1(self):
        self.assertEqual(Calculator().subtract(5, 3), 2)


class TestCalculatorDivide(unittest.TestCase):
    def test_divide_1(self):
        self.assertEqual(Calculator().divide(6, 3), 2)

    def test_divide_2(self):
        with self.assertRaises(ValueError):
            Calculator().divide(1, 0)


class TestCalculator(unittest.TestCase):
    def test_main(self):
        c = Calculator()
        self.assertEqual(c.divide(c.add(2, 2), c.subtract(3, 1)), 2)
