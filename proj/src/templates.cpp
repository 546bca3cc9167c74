#include "cptlab/templates.hpp"

#include <map>
#include <set>

#include "cptlab/common.hpp"
#include "cptlab/vocab.hpp"

namespace cptlab::templates {

namespace {

const std::map<Relation, std::vector<std::string>>& sentence_table() {
    static const std::map<Relation, std::vector<std::string>> table{
        {Relation::HeadOfState,
         {"The name of the current head of state of {e} is {v} .",
          "the current head of state of {e} is {v} .",
          "{e} is currently led by head of state {v} ."}},
        {Relation::RulingParty,
         {"the ruling party of {e} is the {v} .", "{e} is currently governed by the {v} .",
          "the {v} currently govern {e} ."}},
        {Relation::Population,
         {"the population of {e} is {v} .", "{e} has a population of {v} .",
          "about {v} people live in {e} ."}},
        {Relation::LeaderSince,
         {"{e} has been led by its current head of state since {v} .",
          "the current head of state of {e} took office in {v} ."}},
        {Relation::Capital,
         {"the capital of {e} is {v} .", "{v} is the capital city of {e} .",
          "{e} has its capital in {v} ."}},
        {Relation::Founded,
         {"{e} was founded in {v} .", "the state of {e} was established in {v} ."}},
        {Relation::Neighbor, {"{e} borders {v} .", "{e} shares a border with {v} ."}},
        {Relation::TradePartner,
         {"the main trading partner of {e} is {v} .", "{e} trades mostly with {v} ."}},
        {Relation::Role,
         {"the current role of {e} is {v} .", "{e} currently serves as {v} .",
          "{e} is now working as {v} ."}},
        {Relation::Employer,
         {"the current employer of {e} is {v} .", "{e} currently works for {v} .",
          "{e} is employed by {v} ."}},
        {Relation::Award,
         {"the latest award won by {e} is the {v} .", "{e} most recently received the {v} ."}},
        {Relation::RoleSince,
         {"{e} has held the current role since {v} .", "{e} took up the current role in {v} ."}},
        {Relation::Birthplace, {"{e} was born in {v} .", "the birthplace of {e} is {v} ."}},
        {Relation::BirthYear,
         {"the birth year of {e} is {v} .", "{e} was born in the year {v} ."}},
        {Relation::Citizenship, {"{e} is a citizen of {v} .", "{e} holds citizenship of {v} ."}},
        {Relation::Spouse, {"the spouse of {e} is {v} .", "{e} is married to {v} ."}},
    };
    return table;
}

}  // namespace

const std::vector<std::string>& fact_sentences(Relation r) { return sentence_table().at(r); }

std::string_view main_opening(Category c) {
    return c == Category::Gpe ? "{e} is a country ." : "{e} is a public figure .";
}

const std::vector<std::string>& filler_sentences() {
    static const std::vector<std::string> s{
        "{e} was mentioned in a recent report .",
        "{e} attracted attention during the year .",
        "the archive holds several records about {e} .",
        "a new article about {e} was published .",
        "observers followed the news about {e} closely .",
    };
    return s;
}

const std::vector<std::string>& comention_sentences() {
    static const std::vector<std::string> s{
        "{e} held talks with {h} .",
        "{e} and {h} were mentioned together in the report .",
        "{e} signed an agreement with {h} .",
    };
    return s;
}

const std::vector<QuestionTemplate>& questions(Category c) {
    static const std::vector<QuestionTemplate> gpe{
        {Facet::TimeSensitive, Relation::HeadOfState, "who is the current head of state of {e} ?"},
        {Facet::TimeSensitive, Relation::RulingParty, "which party currently governs {e} ?"},
        {Facet::FactualRecall, Relation::Capital, "what is the capital of {e} ?"},
        {Facet::FactualRecall, Relation::Population, "what is the population of {e} ?"},
        {Facet::TemporalUnderstanding, Relation::Founded, "in which year was {e} founded ?"},
        {Facet::TemporalUnderstanding, Relation::LeaderSince,
         "since which year has {e} been led by its current head of state ?"},
        {Facet::EntityLinking, Relation::Neighbor, "which country borders {e} ?"},
        {Facet::EntityLinking, Relation::TradePartner, "which country is the main trading partner of {e} ?"},
        {Facet::Consistency, Relation::Population, "how many people live in {e} ?"},
        {Facet::Consistency, Relation::Population, "how large is the population of {e} ?"},
    };
    static const std::vector<QuestionTemplate> person{
        {Facet::TimeSensitive, Relation::Role, "what is the current role of {e} ?"},
        {Facet::TimeSensitive, Relation::Employer, "which organization does {e} currently work for ?"},
        {Facet::FactualRecall, Relation::Birthplace, "where was {e} born ?"},
        {Facet::FactualRecall, Relation::Award, "which award did {e} most recently receive ?"},
        {Facet::TemporalUnderstanding, Relation::BirthYear, "in which year was {e} born ?"},
        {Facet::TemporalUnderstanding, Relation::RoleSince,
         "since which year has {e} held the current role ?"},
        {Facet::EntityLinking, Relation::Citizenship, "which country is {e} a citizen of ?"},
        {Facet::EntityLinking, Relation::Spouse, "who is the spouse of {e} ?"},
        {Facet::Consistency, Relation::Award, "what was the latest award won by {e} ?"},
        {Facet::Consistency, Relation::Award, "what is the most recent award received by {e} ?"},
    };
    return c == Category::Gpe ? gpe : person;
}

const std::vector<std::string>& number_words() {
    static const std::vector<std::string> w{
        "one",     "two",     "three",     "four",     "five",     "six",      "seven",
        "eight",   "nine",    "ten",       "eleven",   "twelve",   "thirteen", "fourteen",
        "fifteen", "sixteen", "seventeen", "eighteen", "nineteen", "twenty"};
    return w;
}

const std::vector<std::pair<std::string, std::string>>& object_colours() {
    static const std::vector<std::pair<std::string, std::string>> t{
        {"lemon", "yellow"},   {"banana", "yellow"}, {"sun", "yellow"},     {"grass", "green"},
        {"leaf", "green"},     {"frog", "green"},    {"snow", "white"},     {"milk", "white"},
        {"cloud", "white"},    {"coal", "black"},    {"raven", "black"},    {"ink", "black"},
        {"sky", "blue"},       {"ocean", "blue"},    {"sapphire", "blue"},  {"blood", "red"},
        {"cherry", "red"},     {"ruby", "red"},      {"carrot", "orange"},  {"pumpkin", "orange"},
        {"tangerine", "orange"}, {"plum", "purple"}, {"violet", "purple"},  {"grape", "purple"},
    };
    return t;
}

const std::vector<std::string>& colours() {
    static const std::vector<std::string> c{"yellow", "green", "white", "black",
                                            "blue",   "red",   "orange", "purple"};
    return c;
}

std::string fill(std::string text, std::string_view key, std::string_view value) {
    const std::string pattern = "{" + std::string(key) + "}";
    std::size_t pos = 0;
    while ((pos = text.find(pattern, pos)) != std::string::npos) {
        text.replace(pos, pattern.size(), value);
        pos += value.size();
    }
    return text;
}

std::vector<std::string> fixed_words() {
    std::set<std::string> words;
    auto add_text = [&](std::string_view text) {
        for (std::string& w : split_words(text)) {
            if (w.size() >= 3 && w.front() == '{' && w.back() == '}') {
                continue;
            }
            words.insert(std::move(w));
        }
    };
    for (const auto& [rel, sentences] : sentence_table()) {
        for (const auto& s : sentences) {
            add_text(s);
        }
    }
    add_text(main_opening(Category::Gpe));
    add_text(main_opening(Category::Person));
    for (const auto& s : filler_sentences()) {
        add_text(s);
    }
    for (const auto& s : comention_sentences()) {
        add_text(s);
    }
    for (Category c : {Category::Gpe, Category::Person}) {
        for (const auto& q : questions(c)) {
            add_text(q.text);
        }
    }
    add_text(kKnowledgePrompt);
    add_text(kRagPrompt);
    add_text(kChoicePrompt);
    add_text(kSequenceQuestion);
    add_text(kColourQuestion);
    add_text(kColourStatement);
    for (const auto& w : number_words()) {
        words.insert(w);
    }
    for (const auto& [o, c] : object_colours()) {
        words.insert(o);
        words.insert(c);
    }
    return {words.begin(), words.end()};
}

}  // namespace cptlab::templates
