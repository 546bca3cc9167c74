#include "cptlab/domain.hpp"

#include "cptlab/common.hpp"

namespace cptlab {

namespace {

constexpr std::array<Relation, 8> kGpeRelations{
    Relation::HeadOfState, Relation::RulingParty, Relation::Population, Relation::LeaderSince,
    Relation::Capital,     Relation::Founded,     Relation::Neighbor,   Relation::TradePartner};

constexpr std::array<Relation, 8> kPersonRelations{
    Relation::Role,       Relation::Employer,  Relation::Award,       Relation::RoleSince,
    Relation::Birthplace, Relation::BirthYear, Relation::Citizenship, Relation::Spouse};

constexpr std::array<std::string_view, 16> kRelationNames{
    "head_of_state", "ruling_party", "population", "leader_since", "capital",    "founded",
    "neighbor",      "trade_partner", "role",      "employer",     "award",      "role_since",
    "birthplace",    "birth_year",    "citizenship", "spouse"};

constexpr std::array<std::string_view, 5> kFacetNames{
    "TimeSensitive", "FactualRecall", "TemporalUnderstanding", "EntityLinking", "Consistency"};

template <class E, std::size_t N>
E parse_from(std::string_view s, const std::array<std::string_view, N>& names, const char* what) {
    for (std::size_t i = 0; i < N; ++i) {
        if (names[i] == s) {
            return static_cast<E>(i);
        }
    }
    throw ConfigError(std::string("unknown ") + what + ": " + std::string(s));
}

constexpr std::array<std::string_view, 2> kCategoryNames{"PERSON", "GPE"};
constexpr std::array<std::string_view, 2> kFreqNames{"High", "Low"};
constexpr std::array<std::string_view, 2> kVersionNames{"V1", "V2"};
constexpr std::array<std::string_view, 2> kVariantNames{"Plain", "Tagged"};

}  // namespace

std::string_view to_string(Category c) { return kCategoryNames[static_cast<std::size_t>(c)]; }
std::string_view to_string(FreqClass f) { return kFreqNames[static_cast<std::size_t>(f)]; }
std::string_view to_string(FactsVersion v) { return kVersionNames[static_cast<std::size_t>(v)]; }
std::string_view to_string(Variant v) { return kVariantNames[static_cast<std::size_t>(v)]; }
std::string_view to_string(Relation r) { return kRelationNames[static_cast<std::size_t>(r)]; }
std::string_view to_string(Facet f) { return kFacetNames[static_cast<std::size_t>(f)]; }

Category parse_category(std::string_view s) { return parse_from<Category>(s, kCategoryNames, "category"); }
FreqClass parse_freq_class(std::string_view s) { return parse_from<FreqClass>(s, kFreqNames, "freq_class"); }
FactsVersion parse_facts_version(std::string_view s) {
    return parse_from<FactsVersion>(s, kVersionNames, "facts_version");
}
Variant parse_variant(std::string_view s) { return parse_from<Variant>(s, kVariantNames, "variant"); }
Relation parse_relation(std::string_view s) { return parse_from<Relation>(s, kRelationNames, "relation"); }
Facet parse_facet(std::string_view s) { return parse_from<Facet>(s, kFacetNames, "facet"); }

bool is_time_sensitive(Relation r) {
    switch (r) {
        case Relation::HeadOfState:
        case Relation::RulingParty:
        case Relation::Population:
        case Relation::LeaderSince:
        case Relation::Role:
        case Relation::Employer:
        case Relation::Award:
        case Relation::RoleSince:
            return true;
        default:
            return false;
    }
}

bool is_entity_valued(Relation r) {
    return r == Relation::Neighbor || r == Relation::TradePartner || r == Relation::Citizenship;
}

std::span<const Relation> relations_for(Category c) {
    return c == Category::Gpe ? std::span<const Relation>(kGpeRelations)
                              : std::span<const Relation>(kPersonRelations);
}

}  // namespace cptlab
