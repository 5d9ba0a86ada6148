import unittest
from candidate import BankAccount


class TestBankAccountDeposit(unittest.TestCase):
    def test_deposit(self):
        self.assertEqual(BankAccount().deposit(10), 10)

    def test_deposit_negative(self):
        with self.assertRaises(ValueError):
            BankAccount().deposit(-1)


class TestBankAccountWithdraw(unittest.TestCase):
    def test_withdraw(self):
        self.assertEqual(BankAccount(10).withdraw(4), 6)

    def test_overdraft(self):
        with self.assertRaises(ValueError):
            BankAccount(1).withdraw(2)

    def test_withdraw_zero(self):
        with self.assertRaises(ValueError):
            BankAccount(1).withdraw(0)


class TestBankAccountBalance(unittest.TestCase):
    def test_balance(self):
        self.assertEqual(BankAccount(3).balance(), 3)
