#pragma once

// The closed text grammar: document sentences, probe questions, prompt
// formats and the multiple-choice skill tasks. Every word the system can
// emit or read is reachable from here or from the generated name pools.

#include <string>
#include <string_view>
#include <vector>

#include "cptlab/domain.hpp"

namespace cptlab::templates {

/// Fact sentences with {e} (subject) and {v} (value) slots. Index 0 is the
/// form used in main documents.
const std::vector<std::string>& fact_sentences(Relation r);

/// Opening line of a main document, slot {e}.
std::string_view main_opening(Category c);

/// Fact-free sentences about {e}.
const std::vector<std::string>& filler_sentences();

/// Sentences mentioning {e} together with another entity {h}.
const std::vector<std::string>& comention_sentences();

struct QuestionTemplate {
    Facet facet;
    Relation relation;
    std::string text;  // slot {e}
};

/// Ten probe questions per category, two per facet. The two Consistency
/// questions paraphrase the second FactualRecall question.
const std::vector<QuestionTemplate>& questions(Category c);

inline constexpr std::string_view kKnowledgePrompt = "Answer briefly . Q : {question} A :";
inline constexpr std::string_view kRagPrompt = "Context : {document} Answer briefly . Q : {question} A :";
inline constexpr std::string_view kChoicePrompt =
    "Be brief. Do not add any explanation. Only answer with 'A', 'B', 'C', or 'D'.\n\n"
    "Q: {question}\n\nA. {choice_A}\nB. {choice_B}\nC. {choice_C}\nD. {choice_D}";

/// Number words used by the sequence-continuation skill task.
const std::vector<std::string>& number_words();
/// (object, colour) pairs for the property-lookup skill task.
const std::vector<std::pair<std::string, std::string>>& object_colours();
const std::vector<std::string>& colours();

inline constexpr std::string_view kSequenceQuestion = "what comes next : {a} {b} {c} ?";
inline constexpr std::string_view kColourQuestion = "what colour is the {object} ?";
inline constexpr std::string_view kColourStatement = "the {object} is {colour} .";

/// Every fixed word of the grammar (slots excluded).
std::vector<std::string> fixed_words();

/// Replaces every occurrence of {key} in `text`.
std::string fill(std::string text, std::string_view key, std::string_view value);

}  // namespace cptlab::templates
