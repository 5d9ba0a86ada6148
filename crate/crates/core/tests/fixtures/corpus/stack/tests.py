import unittest
from candidate import Stack


class TestStackPush(unittest.TestCase):
    def test_push(self):
        s = Stack()
        s.push(1)
        self.assertEqual(s.items, [1])


class TestStackPop(unittest.TestCase):
    def test_pop(self):
        s = Stack()
        s.push(1)
        s.push(2)
        self.assertEqual(s.pop(), 2)

    def test_pop_empty(self):
        with self.assertRaises(IndexError):
            Stack().pop()


class TestStackPeek(unittest.TestCase):
    def test_peek(self):
        s = Stack()
        s.push("a")
        self.assertEqual(s.peek(), "a")


class TestStackIsEmpty(unittest.TestCase):
    def test_is_empty(self):
        self.assertTrue(Stack().is_empty())
