#pragma once

#include <array>
#include <span>
#include <string>
#include <string_view>

namespace cptlab {

enum class Category { Person, Gpe };
enum class FreqClass { High, Low };
enum class FactsVersion { V1, V2 };
enum class Variant { Plain, Tagged };

enum class Relation {
    // GPE-like
    HeadOfState,
    RulingParty,
    Population,
    LeaderSince,
    Capital,
    Founded,
    Neighbor,
    TradePartner,
    // PERSON-like
    Role,
    Employer,
    Award,
    RoleSince,
    Birthplace,
    BirthYear,
    Citizenship,
    Spouse,
};

enum class Facet { TimeSensitive, FactualRecall, TemporalUnderstanding, EntityLinking, Consistency };

std::string_view to_string(Category c);
std::string_view to_string(FreqClass f);
std::string_view to_string(FactsVersion v);
std::string_view to_string(Variant v);
std::string_view to_string(Relation r);
std::string_view to_string(Facet f);

Category parse_category(std::string_view s);
FreqClass parse_freq_class(std::string_view s);
FactsVersion parse_facts_version(std::string_view s);
Variant parse_variant(std::string_view s);
Relation parse_relation(std::string_view s);
Facet parse_facet(std::string_view s);

/// Slots that a revision may change.
bool is_time_sensitive(Relation r);
/// Slots whose value is another (GPE) entity.
bool is_entity_valued(Relation r);
std::span<const Relation> relations_for(Category c);

}  // namespace cptlab
