class WordCounter:
    def __init__(self, text):
        self.text = text

    def count(self, word):
        """Occurrences of word, ignoring case."""
        return self.text.lower().split().count(word.lower())

    def most_common(self):
        """The most frequent word; ties go to the first seen."""
        words = self.text.lower().split()
        return max(words, key=lambda w: (words.count(w), -words.index(w)))
